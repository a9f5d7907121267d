use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A direction lies on or below the horizon of the shading frame it was
    /// evaluated against.
    #[error("direction is below the horizon (cos = {cos:.3e})")]
    BelowHorizon { cos: f64 },

    #[error("half vector is nearly orthogonal to the outgoing direction (h.wo = {dot:.3e})")]
    DegenerateHalfVector { dot: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("at least {needed} samples required, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Process exit code: 2 for configuration and input problems, 3 for
    /// numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::NonFinite(_) | Error::BelowHorizon { .. } | Error::DegenerateHalfVector { .. } => 3,
            _ => 2,
        }
    }
}
