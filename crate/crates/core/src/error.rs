use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("record {image_id}: invalid {field}: {reason}")]
    InvalidRecord {
        image_id: String,
        field: String,
        reason: String,
    },

    #[error("record {image_id}: unknown category {category:?}")]
    UnknownCategory { image_id: String, category: String },

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("bounding box {bbox} exceeds {width}x{height} raster")]
    OutOfBounds {
        bbox: String,
        width: u32,
        height: u32,
    },

    #[error("dimension mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(
        image_id: impl Into<String>,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::InvalidRecord {
            image_id: image_id.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }
}
