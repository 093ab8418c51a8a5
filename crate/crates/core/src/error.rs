use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, sizes or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two keyed collections (parameters, gradients, moments) disagree on their keys.
    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A value that must be finite (or nonzero) is not.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(String),
}

/// Failure modes of checkpoint loading, each mapped to a distinct code.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("shape mismatch for {name}: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, provided {provided}")]
    Incompatible {
        checkpoint: String,
        provided: String,
    },
}

impl CheckpointError {
    pub fn code(&self) -> u32 {
        match self {
            CheckpointError::BadMagic => 10,
            CheckpointError::VersionMismatch { .. } => 11,
            CheckpointError::Truncated => 12,
            CheckpointError::ShapeMismatch { .. } => 13,
            CheckpointError::BadHeader(_) => 14,
            CheckpointError::Incompatible { .. } => 15,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
