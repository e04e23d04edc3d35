use crate::error::{Error, Result};
use crate::tensor::{Parameter, Parameterized, Tensor};

/// Per-channel batch normalization over the rows of a `[B x C]` matrix.
///
/// Grid activations `[B x H x W x C]` are normalized the same way after
/// flattening all positions into rows, and graph activations treat every
/// node of the mini-batch as a row.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
    cache: Option<Cache>,
}

#[derive(Clone, Debug)]
struct Cache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    training: bool,
    dims: Vec<usize>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(Tensor::full([channels], 1.0)),
            beta: Parameter::new(Tensor::zeros([channels])),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], 1.0),
            momentum: 0.1,
            epsilon: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    /// Accepts any tensor whose last dimension is the channel count.
    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let c = self.channels();
        if x.dims().last() != Some(&c) {
            return Err(Error::shape("batchnorm_forward", x.dims(), &[c]));
        }
        let rows = x.numel() / c;
        let (mean, inv_std) = if training {
            if rows < 2 {
                return Err(Error::BatchTooSmall(rows));
            }
            let mut mean = vec![0.0; c];
            for row in x.data().chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in x.data().chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let unbias = rows as f64 / (rows - 1) as f64;
            let mom = self.momentum;
            for ch in 0..c {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (1.0 - mom) * *rm + mom * mean[ch];
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (1.0 - mom) * *rv + mom * var[ch] * unbias;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
            (mean, inv_std)
        } else {
            let inv_std: Vec<f64> = self
                .running_var
                .data()
                .iter()
                .map(|v| 1.0 / (v + self.epsilon).sqrt())
                .collect();
            (self.running_mean.data().to_vec(), inv_std)
        };

        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut normalized = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for ((row, nrow), orow) in x
            .data()
            .chunks_exact(c)
            .zip(normalized.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for ch in 0..c {
                let xh = (row[ch] - mean[ch]) * inv_std[ch];
                nrow[ch] = xh;
                orow[ch] = gamma[ch] * xh + beta[ch];
            }
        }
        self.cache = Some(Cache {
            normalized,
            inv_std,
            training,
            dims: x.dims().to_vec(),
        });
        Tensor::from_vec(x.dims(), out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Config("batchnorm backward before forward".into()))?;
        if upstream.dims() != cache.dims.as_slice() {
            return Err(Error::shape("batchnorm_backward", upstream.dims(), &cache.dims));
        }
        let c = self.channels();
        let rows = upstream.numel() / c;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xh = vec![0.0; c];
        for (g, xh) in upstream.data().chunks_exact(c).zip(cache.normalized.chunks_exact(c)) {
            for ch in 0..c {
                sum_dy[ch] += g[ch];
                sum_dy_xh[ch] += g[ch] * xh[ch];
            }
        }
        for ch in 0..c {
            self.gamma.grad.data_mut()[ch] += sum_dy_xh[ch];
            self.beta.grad.data_mut()[ch] += sum_dy[ch];
        }
        let gamma = self.gamma.value.data();
        let mut dx = vec![0.0; upstream.numel()];
        let inv_rows = 1.0 / rows as f64;
        for ((g, xh), d) in upstream
            .data()
            .chunks_exact(c)
            .zip(cache.normalized.chunks_exact(c))
            .zip(dx.chunks_exact_mut(c))
        {
            for ch in 0..c {
                let scale = gamma[ch] * cache.inv_std[ch];
                d[ch] = if cache.training {
                    scale * (g[ch] - inv_rows * sum_dy[ch] - xh[ch] * inv_rows * sum_dy_xh[ch])
                } else {
                    scale * g[ch]
                };
            }
        }
        Tensor::from_vec(upstream.dims(), dx)
    }
}

impl Parameterized for BatchNorm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("running_mean", &mut self.running_mean);
        f("running_var", &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;
    use crate::tensor::{grad_check, WithInput};

    fn random(rng: &mut Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap()
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut bn = BatchNorm::new(2);
        let x = Tensor::from_rows(&[&[3.0, 1.0], &[3.0, 2.0], &[3.0, 3.0]]);
        let y = bn.forward(&x, true).unwrap();
        assert!(y.data().chunks(2).all(|r| r[0] == 0.0));
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let mut bn = BatchNorm::new(3);
        bn.gamma.value.fill(0.0);
        bn.beta.value = Tensor::from_vec([3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = bn.forward(&random(&mut Rng::new(1), &[4, 3]), true).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn output_statistics_match_gamma_and_beta() {
        let mut bn = BatchNorm::new(2);
        bn.gamma.value = Tensor::from_vec([2], vec![1.5, 0.3]).unwrap();
        bn.beta.value = Tensor::from_vec([2], vec![-0.2, 0.7]).unwrap();
        bn.epsilon = 1e-12;
        let y = bn.forward(&random(&mut Rng::new(2), &[50, 2]), true).unwrap();
        for ch in 0..2 {
            let col: Vec<f64> = y.data().iter().skip(ch).step_by(2).copied().collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
            assert!((mean - bn.beta.value.data()[ch]).abs() < 1e-6);
            assert!((std - bn.gamma.value.data()[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn running_stats_and_eval_mode() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor::from_vec([4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward(&x, true).unwrap();
        assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-15);
        // Unbiased batch variance 5/3, blended with the initial 1.
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
        // Eval mode is a fixed affine map.
        let a = bn.forward(&Tensor::from_vec([1, 1], vec![0.0]).unwrap(), false).unwrap();
        let b = bn.forward(&Tensor::from_vec([1, 1], vec![1.0]).unwrap(), false).unwrap();
        let c = bn.forward(&Tensor::from_vec([1, 1], vec![2.0]).unwrap(), false).unwrap();
        let (a, b, c) = (a.data()[0], b.data()[0], c.data()[0]);
        assert!(((c - b) - (b - a)).abs() < 1e-12);
        assert!(matches!(bn.forward(&Tensor::zeros([1, 1]), true), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for training in [true, false] {
            let mut rng = Rng::new(3);
            let mut bn = BatchNorm::new(3);
            bn.gamma.value = random(&mut rng, &[3]);
            bn.beta.value = random(&mut rng, &[3]);
            bn.running_mean = random(&mut rng, &[3]);
            let x = random(&mut rng, &[2, 4, 3]);
            let coef = random(&mut rng, &[2, 4, 3]);
            let mut h = WithInput::new(&mut bn, x);
            let report = grad_check(&mut h, 1e-5, 1e-5, |h, backward| {
                let y = h.model.forward(&h.input.value, training)?;
                if backward {
                    let dx = h.model.backward(&coef)?;
                    h.input.grad.axpy(1.0, &dx)?;
                }
                y.dot(&coef)
            })
            .unwrap();
            assert!(report.passed(), "training={training}: {report:?}");
        }
    }
}
