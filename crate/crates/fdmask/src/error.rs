//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated (bad range, unknown id, …).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The operation is not valid in the object's current state
    /// (untrained network, mismatched checkpoints, empty dataset, …).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Array dimensions do not line up.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized artifact is corrupt, truncated, or of the wrong kind/version.
    #[error("format error: {0}")]
    Format(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
