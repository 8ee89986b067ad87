//! Central finite-difference checks of reverse-mode gradients in f64.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{self, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Denominators below this are raised to it. Central differences with
/// `h = 1e-3` on an O(1) loss resolve gradients to roughly 1e-10, so entries
/// smaller than the floor are compared by absolute difference instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest relative error seen.
    pub max_rel_err: f64,
    /// Parameter (or input index) and flat position of the worst entry.
    pub worst: String,
    pub checked: usize,
    /// Entries where both gradients were below [`REL_FLOOR`].
    pub floored: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self { max_rel_err: 0.0, worst: String::new(), checked: 0, floored: 0 }
    }

    fn record(&mut self, what: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        self.floored += (analytic.abs().max(numeric.abs()) < REL_FLOOR) as usize;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = err;
            self.worst = format!("{what}[{index}]: analytic {analytic:e}, numeric {numeric:e}");
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Picks up to `per_tensor` flat positions of a tensor with `len` entries.
fn positions(rng: &mut ChaCha8Rng, len: usize, per_tensor: usize) -> Vec<usize> {
    if len <= per_tensor {
        (0..len).collect()
    } else {
        let mut p = sample(rng, len, per_tensor).into_vec();
        p.sort_unstable();
        p
    }
}

/// Compares gradients of `loss(params)` against central differences on up
/// to `per_param` sampled entries of every parameter whose name passes
/// `select`.
///
/// Central differences see every path through the loss, including ones cut
/// by `detach`. Losses over a model with stop-gradients must hold the
/// detached values fixed themselves.
pub fn check_params<F, S>(params: &mut ParamSet<f64>, select: S, loss: F, h: f64, per_param: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&ParamSet<f64>) -> Result<Tensor<f64>>,
    S: Fn(&str) -> bool,
{
    params.zero_grad();
    loss(params)?.backward()?;
    let names: Vec<String> = params.names().filter(|n| select(n)).map(String::from).collect();
    let grads = names.iter().map(|n| params.get(n).grad().ok_or_else(|| Error::MissingGrad(n.clone()))).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::new();
    for (name, grad) in names.iter().zip(grads) {
        let base = params.get(name).to_vec();
        for i in positions(&mut rng, base.len(), per_param) {
            let mut v = base.clone();
            v[i] = base[i] + h;
            params.set_values(name, v.clone())?;
            let plus = tensor::no_grad(|| loss(params))?.item();
            v[i] = base[i] - h;
            params.set_values(name, v)?;
            let minus = tensor::no_grad(|| loss(params))?.item();
            report.record(name, i, grad[i], (plus - minus) / (2.0 * h));
        }
        params.set_values(name, base)?;
    }
    Ok(report)
}

/// Same check for the inputs of a function: every input is made a leaf with
/// `requires_grad`, and up to `per_input` entries of each are perturbed.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, h: f64, per_input: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves = inputs.iter().map(|t| Tensor::param(t.shape(), t.to_vec())).collect::<Result<Vec<_>>>()?;
    f(&leaves)?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::new();
    for (k, leaf) in leaves.iter().enumerate() {
        let grad = leaf.grad().ok_or_else(|| Error::MissingGrad(format!("input {k}")))?;
        let base = leaf.to_vec();
        for i in positions(&mut rng, base.len(), per_input) {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                let mut args = leaves.clone();
                args[k] = Tensor::new(leaf.shape(), v)?;
                Ok(tensor::no_grad(|| f(&args))?.item())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            report.record(&format!("input {k}"), i, grad[i], numeric);
        }
    }
    Ok(report)
}

/// `Σ y ⊙ r` for a fixed random `r`: a scalar probe that exercises every
/// output entry with a distinct weight.
pub fn random_projection(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..y.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(tensor::sum(&tensor::mul(y, &Tensor::new(y.shape(), r)?)?))
}
