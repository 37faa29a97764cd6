use thiserror::Error;

/// Engine-wide error type. Variants mirror the contract language used across
/// the crate: shape/argument violations are caller bugs, the rest are
/// environment or data conditions the caller can react to.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data format error: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
