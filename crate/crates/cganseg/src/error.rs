//! Error type shared across the crate.

use thiserror::Error;

/// Unified error type for tensor math, data handling, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A caller-supplied value is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A tensor that must be finite contains NaN or an infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Misuse of the autodiff tape (double backward, foreign handle, ...).
    #[error("tape error: {0}")]
    Tape(String),

    /// A serialized artifact (checkpoint, image, manifest) is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged; carries the epoch/batch where it happened.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
