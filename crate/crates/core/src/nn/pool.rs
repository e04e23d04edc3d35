use crate::error::{Error, Result};
use crate::tensor::{Parameter, Parameterized, Tensor};

/// Per-group mean of feature rows: `[N x C]` to `[G x C]`.
///
/// Used as the graph readout (groups are graphs of a batch) and as global
/// spatial pooling on grids (groups are images).
#[derive(Clone, Debug, Default)]
pub struct GlobalMeanPool {
    membership: Vec<usize>,
    counts: Vec<usize>,
}

impl GlobalMeanPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor, membership: &[usize], groups: usize) -> Result<Tensor> {
        let (n, c) = x.matrix_dims()?;
        if membership.len() != n {
            return Err(Error::shape("global_mean_pool", x.dims(), &[membership.len()]));
        }
        let mut counts = vec![0usize; groups];
        for &g in membership {
            if g >= groups {
                return Err(Error::Config(format!("node assigned to group {g} of {groups}")));
            }
            counts[g] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::EmptyRegion);
        }
        let mut out = vec![0.0; groups * c];
        for (row, &g) in x.data().chunks_exact(c).zip(membership) {
            for (o, v) in out[g * c..(g + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
        for (g, &cnt) in counts.iter().enumerate() {
            out[g * c..(g + 1) * c].iter_mut().for_each(|v| *v /= cnt as f64);
        }
        self.membership = membership.to_vec();
        self.counts = counts;
        Tensor::from_vec([groups, c], out)
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<Tensor> {
        let (g, c) = upstream.matrix_dims()?;
        if g != self.counts.len() {
            return Err(Error::shape("global_mean_pool_backward", upstream.dims(), &[self.counts.len(), c]));
        }
        let mut dx = vec![0.0; self.membership.len() * c];
        for (row, &g) in dx.chunks_exact_mut(c).zip(&self.membership) {
            let scale = 1.0 / self.counts[g] as f64;
            for (d, u) in row.iter_mut().zip(upstream.row(g)) {
                *d = u * scale;
            }
        }
        Tensor::from_vec([self.membership.len(), c], dx)
    }
}

impl Parameterized for GlobalMeanPool {
    fn visit_params(&mut self, _f: &mut dyn FnMut(&str, &mut Parameter)) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;
    use crate::tensor::{grad_check, WithInput};

    #[test]
    fn identical_rows_pool_to_that_row() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let y = GlobalMeanPool::new().forward(&x, &[0, 0, 0], 1).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn groups_of_one_and_three() {
        let x = Tensor::from_rows(&[&[4.0], &[1.0], &[2.0], &[6.0]]);
        let mut pool = GlobalMeanPool::new();
        let y = pool.forward(&x, &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(y.data(), &[4.0, 3.0]);
        let dx = pool.backward(&Tensor::from_rows(&[&[1.0], &[3.0]])).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn empty_group_is_an_error() {
        let x = Tensor::zeros([2, 1]);
        assert!(matches!(
            GlobalMeanPool::new().forward(&x, &[0, 0], 2),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let x = Tensor::from_vec([6, 3], (0..18).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let coef = Tensor::from_vec([2, 3], (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let membership = [0, 1, 1, 0, 1, 1];
        let mut pool = GlobalMeanPool::new();
        let mut h = WithInput::new(&mut pool, x);
        let report = grad_check(&mut h, 1e-5, 1e-5, |h, backward| {
            let y = h.model.forward(&h.input.value, &membership, 2)?;
            if backward {
                let dx = h.model.backward(&coef)?;
                h.input.grad.axpy(1.0, &dx)?;
            }
            y.dot(&coef)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
