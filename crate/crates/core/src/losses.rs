//! Scalar reference forms of the training losses.
//!
//! The networks compute these on tensors; the scalar versions here define the
//! contract and back the closed-form and finite-difference checks.

use crate::energy::EnergyMap;
use crate::error::{Error, Result};

/// Probabilities are clamped to at least this before taking a log.
pub const LOG_EPS: f64 = 1e-12;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-sum_i onehot_i * log(probs_i)`, i.e. minus the log probability of the true class.
pub fn cross_entropy(probs: &[f64], onehot: &[f64]) -> Result<f64> {
    if probs.len() != onehot.len() || probs.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities vs {} label entries",
            probs.len(),
            onehot.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::InvalidArgument(format!("probabilities must be nonnegative and sum to 1, sum is {sum}")));
    }
    let ones = onehot.iter().filter(|v| **v == 1.0).count();
    let zeros = onehot.iter().filter(|v| **v == 0.0).count();
    if ones != 1 || ones + zeros != onehot.len() {
        return Err(Error::InvalidArgument("label must be one-hot".into()));
    }
    Ok(probs
        .iter()
        .zip(onehot)
        .map(|(p, y)| -y * p.max(LOG_EPS).ln())
        .sum())
}

/// Gradient of `cross_entropy(softmax(logits), onehot(target))` with respect
/// to the logits: `softmax(logits) - onehot`.
pub fn cross_entropy_logits_grad(logits: &[f64], target: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[target] -= 1.0;
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CganLosses {
    pub d_loss: f64,
    pub g_loss: f64,
    /// The mean absolute map difference before weighting by lambda.
    pub l1: f64,
}

/// Mean absolute difference between two equally shaped value buffers.
pub fn mean_abs_diff(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    Ok(total / a.len() as f64)
}

/// Conditional GAN losses for one discriminator verdict pair.
///
/// `d_loss = -[log d_real + log(1 - d_fake)]` and the non-saturating generator
/// loss `g_loss = -log d_fake + lambda * mean|fake - real|`. Probabilities are
/// clamped into `[LOG_EPS, 1 - LOG_EPS]`.
pub fn cgan_losses(d_real: f64, d_fake: f64, fake: &EnergyMap, real: &EnergyMap, lambda: f64) -> Result<CganLosses> {
    if fake.dimensions() != real.dimensions() {
        return Err(Error::ShapeMismatch(format!(
            "generated map {:?} vs groundtruth {:?}",
            fake.dimensions(),
            real.dimensions()
        )));
    }
    let clamp = |p: f64| p.clamp(LOG_EPS, 1.0 - LOG_EPS);
    let (dr, df) = (clamp(d_real), clamp(d_fake));
    let l1 = mean_abs_diff(fake.values(), real.values())?;
    Ok(CganLosses {
        d_loss: -(dr.ln() + (1.0 - df).ln()),
        g_loss: -df.ln() + lambda * l1,
        l1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_over_31() {
        let p = vec![1.0 / 31.0; 31];
        let mut y = vec![0.0; 31];
        y[4] = 1.0;
        assert!((cross_entropy(&p, &y).unwrap() - 31f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn half_probability_is_ln2() {
        assert!((cross_entropy(&[0.5, 0.25, 0.25], &[1.0, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_rejects_bad_inputs() {
        assert!(cross_entropy(&[0.5, 0.5], &[1.0]).is_err());
        assert!(cross_entropy(&[0.7, 0.7], &[1.0, 0.0]).is_err());
        assert!(cross_entropy(&[0.5, 0.5], &[1.0, 1.0]).is_err());
        assert!(cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn cgan_closed_form() {
        let m = EnergyMap::from_values(3, 2, vec![1.0, 0.0, 2.0, 3.0, 0.5, 0.0], 1.0).unwrap();
        let l = cgan_losses(0.5, 0.5, &m, &m, 100.0).unwrap();
        assert!((l.d_loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l.g_loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.l1, 0.0);
        let perfect = cgan_losses(1.0, 0.0, &m, &m, 1.0).unwrap();
        assert!(perfect.d_loss < 1e-9);
        let other = EnergyMap::zeros(2, 3, 1.0).unwrap();
        assert!(cgan_losses(0.5, 0.5, &m, &other, 1.0).is_err());
    }
}
