//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by dataset generation, model forward passes, training and I/O.
#[derive(Error, Debug)]
pub enum ImlError {
    /// A caller-supplied value violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two tensors or images that must agree in shape did not.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A non-finite value appeared where finite values are required.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// Malformed configuration file or flag combination.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint blob could not be read or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Annotator client failure (transport or protocol).
    #[error("annotator client error: {0}")]
    Client(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ImlError>;
