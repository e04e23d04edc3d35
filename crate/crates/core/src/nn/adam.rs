use crate::tensor::{Parameterized, Tensor};

/// Bias-corrected Adam. Moment buffers are created on the first step, in the
/// model's parameter visit order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_params(&mut |_, p| {
            if idx == first.len() {
                first.push(Tensor::zeros(p.value.shape().clone()));
                second.push(Tensor::zeros(p.value.shape().clone()));
            }
            let m = first[idx].data_mut();
            let v = second[idx].data_mut();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
            p.zero_grad();
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Parameter;

    struct Scalar(Parameter);

    impl Parameterized for Scalar {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
            f("w", &mut self.0);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = Scalar(Parameter::new(Tensor::full([3], 0.7)));
        let mut adam = AdamState::default();
        adam.step(&mut m);
        assert_eq!(m.0.value, Tensor::full([3], 0.7));
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = Scalar(Parameter::new(Tensor::scalar(1.0)));
        m.0.grad = Tensor::scalar(-4.2);
        let mut adam = AdamState::new(0.01);
        adam.step(&mut m);
        assert!((m.0.value.data()[0] - 1.01).abs() < 1e-9);
        assert_eq!(m.0.grad.data()[0], 0.0);
    }

    #[test]
    fn minimizes_shifted_quadratic() {
        let mut m = Scalar(Parameter::new(Tensor::scalar(0.0)));
        let mut adam = AdamState::new(0.1);
        for _ in 0..200 {
            let w = m.0.value.data()[0];
            m.0.grad.data_mut()[0] = 2.0 * (w - 3.0);
            adam.step(&mut m);
        }
        assert!((m.0.value.data()[0] - 3.0).abs() < 0.05, "{}", m.0.value.data()[0]);
    }
}
