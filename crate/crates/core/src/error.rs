use std::path::PathBuf;

use thiserror::Error;

use crate::grid::Axis;

pub type Result<T> = std::result::Result<T, SpfError>;

#[derive(Debug, Error)]
pub enum SpfError {
    #[error("{axis} length {len} is not divisible by factor {factor}")]
    NotDivisible { axis: Axis, len: usize, factor: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at {context}")]
    NonFinite { context: String },

    #[error("malformed container at {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("blob {path} has {actual} bytes, expected {expected}")]
    BlobLength {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> SpfError {
    SpfError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> SpfError {
    SpfError::Shape(msg.into())
}
