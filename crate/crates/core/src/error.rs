use std::io;

use thiserror::Error;

use crate::tensor::GridBox;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid box {gbox:?} does not fit a {grid}x{grid} grid")]
    BoxOutOfBounds { gbox: GridBox, grid: usize },

    #[error("invalid grid size {0}; at least 2 cells per side are required")]
    InvalidGridSize(usize),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("image `{0}` is not present in the ground truth")]
    UnknownImage(String),

    #[error(transparent)]
    Bridge(#[from] BridgeError),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }

    pub fn invalid(reason: impl Into<String>) -> Self {
        Error::InvalidArgument(reason.into())
    }
}

/// Failures talking to an external feature/scoring worker.
#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("bridge transport failed: {0}")]
    Transport(#[source] io::Error),

    #[error("bridge closed the connection")]
    Closed,

    #[error("bridge did not answer within {0:?}")]
    Timeout(std::time::Duration),

    #[error("bridge protocol violation: {0}")]
    Protocol(String),

    #[error("bridge tensor shape {actual} does not match handshake {expected}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("bridge reported `{code}`: {message}")]
    Remote { code: String, message: String },
}
