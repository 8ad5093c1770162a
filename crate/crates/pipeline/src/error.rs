use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] foodlens_core::Error),

    #[error(transparent)]
    Model(#[from] foodlens_models::ModelError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    /// A failure inside one step of end-to-end inference.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },

    #[error("render: {0}")]
    Render(String),

    #[error("plot: {0}")]
    Plot(String),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn at(stage: &'static str) -> impl FnOnce(PipelineError) -> PipelineError {
        move |e| PipelineError::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// Stage name for stage errors.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            PipelineError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
