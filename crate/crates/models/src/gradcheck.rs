//! Autograd versus central finite differences.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::scalar;
use crate::params::ParamStore;

/// Smallest gradient magnitude used as the relative-error denominator.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

/// Compares `d loss / d p` from backprop with `(L(p+h) - L(p-h)) / 2h` on
/// `probes` randomly chosen entries of every parameter. The store must be F64.
pub fn check_gradients<F>(params: &ParamStore, loss: F, probes: usize, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    if params.dtype() != DType::F64 {
        return Err(ModelError::InvalidInput("gradient check needs an f64 parameter store".into()));
    }
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
    };
    for (name, var) in params.named_vars() {
        let shape = var.shape().clone();
        let original: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; original.len()],
        };
        for _ in 0..probes.min(original.len()) {
            let i = rng.random_range(0..original.len());
            let eval = |delta: f64| -> Result<f64> {
                let mut v = original.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, &shape, var.device())?)?;
                scalar(&loss()?)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            var.set(&Tensor::from_vec(original.clone(), &shape, var.device())?)?;
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}
