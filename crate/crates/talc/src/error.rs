//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TalcError {
    /// Dimension/shape disagreement between tensors or configs.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller violated an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid configuration values or incompatible checkpoint/config pairs.
    #[error("config error: {0}")]
    Config(String),

    /// Out-of-range timestep or frame index.
    #[error("index error: {0}")]
    Index(String),

    /// File or serialization format violation.
    #[error("format error: {0}")]
    Format(String),

    /// HTTP transport failure talking to an external captioner/judge.
    #[error("transport error: {0}")]
    Transport(String),

    /// Unparseable response from an external service; carries the raw text.
    #[error("parse error: {reason}; raw response: {raw}")]
    Parse { reason: String, raw: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TalcError>;
