use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("degenerate channel {channel}: percentile divisor is {divisor}")]
    DegenerateChannel { channel: usize, divisor: f64 },

    #[error("label {0} outside {{0,1,2,3}}")]
    InvalidLabel(u8),

    #[error("phantom does not fit: {0}")]
    OutOfBounds(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric divergence at step {step}: {what}")]
    Divergence { step: u64, what: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Nifti(#[from] nifti::NiftiError),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    /// True for failures caused by the filesystem or file contents rather
    /// than by configuration or numerics.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Format { .. } | Error::Nifti(_) | Error::Json(_)
        )
    }
}
