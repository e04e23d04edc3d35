use super::{glorot, relu_margin, Activation};
use crate::data::Rng;
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Parameter, Parameterized, Tensor};

/// `activation(X W + b)` over a batch of rows.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub activation: Activation,
    cache: Option<(Tensor, Tensor)>,
    pre: Vec<f64>,
}

impl DenseLayer {
    pub fn new(rng: &mut Rng, inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self::from_params(
            glorot(rng, &[inputs, outputs], inputs, outputs),
            Parameter::new(Tensor::zeros([outputs])),
            activation,
        )
    }

    pub fn from_params(weight: Parameter, bias: Parameter, activation: Activation) -> Self {
        DenseLayer {
            weight,
            bias,
            activation,
            cache: None,
            pre: Vec::new(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.dims()[1]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, i) = x.matrix_dims()?;
        if i != self.inputs() {
            return Err(Error::shape("dense_forward", x.dims(), self.weight.value.dims()));
        }
        let o = self.outputs();
        let mut out = vec![0.0; b * o];
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(
            b,
            o,
            i,
            MatRef::row_major(x.data(), i),
            MatRef::row_major(self.weight.value.data(), o),
            &mut out,
        );
        if self.activation == Activation::Relu {
            self.pre.clone_from(&out);
        }
        if self.activation != Activation::Identity {
            out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        }
        let out = Tensor::from_vec([b, o], out)?;
        self.cache = Some((x.clone(), out.clone()));
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (x, y) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Config("dense backward before forward".into()))?;
        if upstream.dims() != y.dims() {
            return Err(Error::shape("dense_backward", upstream.dims(), y.dims()));
        }
        let (b, i) = x.matrix_dims()?;
        let o = self.outputs();
        let dz: Vec<f64> = if self.activation == Activation::Identity {
            upstream.data().to_vec()
        } else {
            upstream
                .data()
                .iter()
                .zip(y.data())
                .map(|(&g, &y)| g * self.activation.derivative_from_output(y))
                .collect()
        };
        gemm(
            i,
            o,
            b,
            MatRef::transposed(x.data(), i),
            MatRef::row_major(&dz, o),
            self.weight.grad.data_mut(),
        );
        let db = self.bias.grad.data_mut();
        for row in dz.chunks_exact(o) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let mut dx = vec![0.0; b * i];
        gemm(
            b,
            i,
            o,
            MatRef::row_major(&dz, o),
            MatRef::transposed(self.weight.value.data(), o),
            &mut dx,
        );
        Tensor::from_vec([b, i], dx)
    }

    /// Distance of the last forward's ReLU pre-activations from the kink.
    pub fn kink_margin(&self) -> f64 {
        relu_margin(&self.pre)
    }
}

impl Parameterized for DenseLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}
