//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Caller handed us an argument outside the documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A computation produced NaN/Inf or a statistical check failed.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Malformed file contents (binary formats, CSV, IDX).
    #[error("parse error: {0}")]
    Parse(String),
    /// Bad configuration key or value.
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
