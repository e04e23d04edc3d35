//! Trainable layers, losses and the optimizer shared by graph and grid models.
//!
//! Every layer follows the same contract: `forward` caches whatever the
//! backward pass needs, and `backward(upstream)` returns the input gradient
//! while adding parameter gradients into each [`Parameter::grad`].

mod adam;
mod batchnorm;
mod dense;
mod loss;
mod pool;

pub use adam::AdamState;
pub use batchnorm::BatchNorm;
pub use dense::DenseLayer;
pub use loss::{masked_mse, masked_mse_batch, softmax_xent, Region};
pub use pool::GlobalMeanPool;

use crate::data::Rng;
use crate::tensor::{Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Glorot-uniform initialization: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut Rng, dims: &[usize], fan_in: usize, fan_out: usize) -> Parameter {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.uniform(-a, a)).collect();
    Parameter::new(Tensor::from_vec(dims, data).expect("sized by construction"))
}

/// Smallest |pre-activation| among ReLU inputs; infinity when there are none.
pub(crate) fn relu_margin(pre: &[f64]) -> f64 {
    pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}
