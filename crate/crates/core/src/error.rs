//! Error taxonomy shared across the simulator.

use thiserror::Error;

/// Errors surfaced by the public API.
///
/// Internal invariant violations (out-of-range dispatch indices, empty
/// selection groups) are programmer errors and panic via `assert!` instead.
#[derive(Debug, Error)]
pub enum SimError {
    /// Invalid configuration; `field` names the offending key.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    /// Bad training data handed to an operation (label range, empty batch).
    #[error("data error: {0}")]
    Data(String),

    /// On-disk file does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// A protocol-level precondition was violated (cycle state, empty device).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Non-finite values reached the numeric core.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SimError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        SimError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
