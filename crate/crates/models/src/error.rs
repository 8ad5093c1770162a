use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Data(#[from] foodlens_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("empty training set: {0}")]
    EmptyTrainingSet(String),

    #[error("{stage}: non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        stage: &'static str,
        epoch: usize,
        step: usize,
        value: f64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl ModelError {
    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        ModelError::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
