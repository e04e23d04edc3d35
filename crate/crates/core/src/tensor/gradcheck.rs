use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Anything that owns trainable parameters.
///
/// Visit order must be stable: optimizers and checkpoints rely on it.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter));

    /// Non-trainable state that still belongs in a checkpoint.
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor)) {}

    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.numel());
        n
    }
}

/// Pairs a model with an input tensor promoted to a parameter, so a gradient
/// check also covers the input gradient. The input is visited last, as `input`.
pub struct WithInput<'a, M> {
    pub model: &'a mut M,
    pub input: Parameter,
}

impl<'a, M: Parameterized> WithInput<'a, M> {
    pub fn new(model: &'a mut M, input: Tensor) -> Self {
        WithInput {
            model,
            input: Parameter::new(input),
        }
    }
}

impl<M: Parameterized> Parameterized for WithInput<'_, M> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.model.visit_params(f);
        f("input", &mut self.input);
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat entry index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compare analytic gradients against central finite differences.
///
/// `loss(model, backward)` evaluates the scalar objective; when `backward` is
/// true it must also accumulate parameter gradients. Gradients are zeroed
/// before the analytic pass and left holding the analytic values afterwards.
pub fn grad_check<M, F>(model: &mut M, eps: f64, tol: f64, mut loss: F) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    model.zero_grads();
    let base = loss(model, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss at base point is {base}")));
    }
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, p| grads.push((name.to_string(), p.grad.data().to_vec())));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
        tol,
    };
    for (pi, (name, analytic)) in grads.iter().enumerate() {
        for (e, &a) in analytic.iter().enumerate() {
            let plus = perturbed(model, pi, e, eps, &mut loss)?;
            let minus = perturbed(model, pi, e, -eps, &mut loss)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss while perturbing {name}[{e}]")));
            }
            let n = (plus - minus) / (2.0 * eps);
            let rel = relative_error(a, n);
            report.entries += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), e));
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}

fn perturbed<M, F>(model: &mut M, param: usize, entry: usize, delta: f64, loss: &mut F) -> Result<f64>
where
    M: Parameterized,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    let mut original = 0.0;
    let mut idx = 0;
    model.visit_params(&mut |_, p| {
        if idx == param {
            original = p.value.data()[entry];
            p.value.data_mut()[entry] = original + delta;
        }
        idx += 1;
    });
    let value = loss(model, false);
    idx = 0;
    model.visit_params(&mut |_, p| {
        if idx == param {
            p.value.data_mut()[entry] = original;
        }
        idx += 1;
    });
    value
}
