//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A value fell outside its declared range.
    #[error("value out of range for {what}: {value} not in [{lo}, {hi}]")]
    OutOfRange {
        what: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// A configuration is internally inconsistent or unsatisfiable.
    #[error("config error: {0}")]
    Config(String),

    /// An input violated an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Tensor or token-set shapes do not match the active model config.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training produced a non-finite loss; diagnostics are in the message.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
