use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of softmax(logits) against integer labels, with its
/// gradient `(softmax - onehot) / B`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = logits.matrix_dims()?;
    if labels.len() != b {
        return Err(Error::shape("softmax_xent", logits.dims(), &[labels.len()]));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * c];
    for ((row, g), &label) in logits.data().chunks_exact(c).zip(grad.chunks_exact_mut(c)).zip(labels) {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - max).exp();
            z += *gv;
        }
        loss += z.ln() - (row[label] - max);
        for gv in g.iter_mut() {
            *gv /= z * b as f64;
        }
        g[label] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, Tensor::from_vec([b, c], grad)?))
}

/// Which pixels a masked loss reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    /// Unknown pixels (evaluation).
    Inside,
    /// Observed pixels (training).
    Outside,
}

impl Region {
    #[inline]
    fn selects(self, missing: bool) -> bool {
        match self {
            Region::Inside => missing,
            Region::Outside => !missing,
        }
    }
}

/// Mean squared error over the pixels of one `[n x m x l]` image selected by
/// `region`, averaged over pixels and channels.
pub fn masked_mse(pred: &Tensor, target: &Tensor, missing: &[bool], region: Region) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::shape("masked_mse", pred.dims(), target.dims()));
    }
    let l = *pred.dims().last().unwrap_or(&1);
    if missing.len() * l != pred.numel() {
        return Err(Error::shape("masked_mse", pred.dims(), &[missing.len()]));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), &m) in pred.data().chunks_exact(l).zip(target.data().chunks_exact(l)).zip(missing) {
        if region.selects(m) {
            for (a, b) in p.iter().zip(t) {
                sum += (a - b) * (a - b);
            }
            count += l;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// Batch mean of [`masked_mse`] over `[B x n x m x l]` tensors, with gradient
/// with respect to `pred`. Pixels outside the region get zero gradient.
pub fn masked_mse_batch(
    pred: &Tensor,
    target: &Tensor,
    missing: &[&[bool]],
    region: Region,
) -> Result<(f64, Tensor)> {
    if pred.dims() != target.dims() || pred.dims().len() != 4 {
        return Err(Error::shape("masked_mse_batch", pred.dims(), target.dims()));
    }
    let b = pred.dims()[0];
    let plane = pred.numel() / b.max(1);
    let l = pred.dims()[3];
    if missing.len() != b {
        return Err(Error::shape("masked_mse_batch", pred.dims(), &[missing.len()]));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.numel()];
    for (i, mask) in missing.iter().enumerate() {
        let span = i * plane..(i + 1) * plane;
        let (p, t) = (&pred.data()[span.clone()], &target.data()[span.clone()]);
        let count = mask.iter().filter(|&&m| region.selects(m)).count() * l;
        if count == 0 || mask.len() * l != plane {
            return Err(Error::EmptyRegion);
        }
        let scale = 1.0 / (count as f64 * b as f64);
        let mut sum = 0.0;
        for (px, &m) in mask.iter().enumerate() {
            if region.selects(m) {
                for k in px * l..(px + 1) * l {
                    let d = p[k] - t[k];
                    sum += d * d;
                    grad[span.start + k] = 2.0 * d * scale;
                }
            }
        }
        total += sum / count as f64;
    }
    Ok((total / b as f64, Tensor::from_vec(pred.dims(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;
    use crate::tensor::relative_error;

    #[test]
    #[allow(clippy::approx_constant)]
    fn uniform_logits_give_ln_classes() {
        let (loss, _) = softmax_xent(&Tensor::zeros([3, 10]), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-15);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let logits = Tensor::from_rows(&[&[1000.0, 0.0, -5.0]]);
        let (loss, _) = softmax_xent(&logits, &[0]).unwrap();
        assert!((0.0..1e-12).contains(&loss));
        assert!(matches!(
            softmax_xent(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let logits = Tensor::from_vec([4, 5], (0..20).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap();
        let labels = [1, 0, 4, 2];
        let (_, grad) = softmax_xent(&logits, &labels).unwrap();
        let eps = 1e-5;
        for k in 0..20 {
            let mut plus = logits.clone();
            plus.data_mut()[k] += eps;
            let mut minus = logits.clone();
            minus.data_mut()[k] -= eps;
            let n = (softmax_xent(&plus, &labels).unwrap().0 - softmax_xent(&minus, &labels).unwrap().0) / (2.0 * eps);
            assert!(relative_error(grad.data()[k], n) < 1e-6);
        }
    }

    #[test]
    fn masked_mse_basics() {
        let mut rng = Rng::new(2);
        let t = Tensor::from_vec([3, 3, 2], (0..18).map(|_| rng.next_f64()).collect()).unwrap();
        let mut missing = vec![false; 9];
        missing[4] = true;
        missing[0] = true;
        for region in [Region::Inside, Region::Outside] {
            assert_eq!(masked_mse(&t, &t, &missing, region).unwrap(), 0.0);
            let shifted = t.map(|v| v + 1.0);
            assert!((masked_mse(&shifted, &t, &missing, region).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!(matches!(masked_mse(&t, &t, &[false; 9], Region::Inside), Err(Error::EmptyRegion)));
    }

    #[test]
    fn masked_mse_matches_loop_oracle() {
        let mut rng = Rng::new(3);
        let p = Tensor::from_vec([4, 5, 1], (0..20).map(|_| rng.next_f64()).collect()).unwrap();
        let t = Tensor::from_vec([4, 5, 1], (0..20).map(|_| rng.next_f64()).collect()).unwrap();
        let missing: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..20 {
            if !missing[i] {
                s += (p.data()[i] - t.data()[i]).powi(2);
                n += 1.0;
            }
        }
        assert_eq!(masked_mse(&p, &t, &missing, Region::Outside).unwrap(), s / n);
        // Region-size weighted halves recombine into the plain MSE.
        let inside = masked_mse(&p, &t, &missing, Region::Inside).unwrap();
        let k = missing.iter().filter(|&&m| m).count() as f64;
        let full = masked_mse(&p, &t, &[false; 20], Region::Outside).unwrap();
        assert!(((inside * k + (s / n) * (20.0 - k)) / 20.0 - full).abs() < 1e-15);
    }

    #[test]
    fn batch_loss_ignores_targets_inside_the_hole() {
        let mut rng = Rng::new(4);
        let p = Tensor::from_vec([2, 3, 3, 1], (0..18).map(|_| rng.next_f64()).collect()).unwrap();
        let mut t = Tensor::from_vec([2, 3, 3, 1], (0..18).map(|_| rng.next_f64()).collect()).unwrap();
        let m0: Vec<bool> = (0..9).map(|i| i < 3).collect();
        let m1: Vec<bool> = (0..9).map(|i| i == 8).collect();
        let masks = [m0.as_slice(), m1.as_slice()];
        let (l1, g1) = masked_mse_batch(&p, &t, &masks, Region::Outside).unwrap();
        t.data_mut()[0] += 5.0;
        t.data_mut()[9 + 8] -= 3.0;
        let (l2, g2) = masked_mse_batch(&p, &t, &masks, Region::Outside).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        assert_eq!(g1.data()[0], 0.0);
        let single = (masked_mse(&Tensor::from_vec([3, 3, 1], p.data()[..9].to_vec()).unwrap(),
            &Tensor::from_vec([3, 3, 1], t.data()[..9].to_vec()).unwrap(), &m0, Region::Outside).unwrap()
            + masked_mse(&Tensor::from_vec([3, 3, 1], p.data()[9..].to_vec()).unwrap(),
            &Tensor::from_vec([3, 3, 1], t.data()[9..].to_vec()).unwrap(), &m1, Region::Outside).unwrap()) / 2.0;
        assert!((l2 - single).abs() < 1e-15);
    }
}
