//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or vector dimensions do not conform.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition on an argument value was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced or encountered a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Inconsistent or unsupported configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Sequence file does not start with the expected magic bytes.
    #[error("bad magic in {0}")]
    BadMagic(String),

    /// Sequence or checkpoint file has an unsupported format version.
    #[error("unsupported format version {0}")]
    Version(u32),

    /// File ended before the declared payload was read.
    #[error("truncated file {0}")]
    Truncated(String),

    /// Declared tensor shape would overflow or exceeds sane bounds.
    #[error("shape overflow in {0}")]
    ShapeOverflow(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
