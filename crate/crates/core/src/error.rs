//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// An argument violates an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A forward pass or loss produced NaN/Inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// On-disk data failed validation.
    #[error("corrupt data in {file}: {detail}")]
    Corrupt { file: String, detail: String },

    /// Configuration file or override could not be applied.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }

    pub fn corrupt(file: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            file: file.into(),
            detail: detail.into(),
        }
    }
}
