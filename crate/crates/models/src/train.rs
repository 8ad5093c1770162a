//! Shared training-loop helpers.

use candle_core::Var;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Losses and metrics recorded at the end of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    /// Stage-specific validation metric (accuracy, MAE, L1 ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
    /// Secondary training loss (the discriminator loss for the GAN).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn push(&mut self, entry: EpochLog) {
        self.epochs.push(entry);
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

pub(crate) fn ensure_finite(stage: &'static str, epoch: usize, step: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ModelError::NonFiniteLoss {
            stage,
            epoch,
            step,
            value,
        })
    }
}

pub(crate) fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

pub(crate) fn adam(vars: Vec<Var>, lr: f64, beta1: f64, weight_decay: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        },
    )?)
}

/// Cosine decay from `base` to `base * floor` over `total` epochs.
pub(crate) fn cosine_lr(base: f64, floor: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = epoch as f64 / (total - 1) as f64;
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
