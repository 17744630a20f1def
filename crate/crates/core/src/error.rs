use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = CapsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CapsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: wrong magic {found:#010x}, expected {expected:#010x}")]
    WrongMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl CapsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Format { path: path.into(), msg: msg.into() }
    }
}
