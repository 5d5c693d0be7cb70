use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the public
/// contracts promise: shape mismatches, violated call preconditions, numeric
/// breakdown, and I/O or format problems at the filesystem boundary.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes are inconsistent with the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A documented precondition of an API call was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required (losses, gradients).
    #[error("numeric failure: {0}")]
    Numerics(String),

    /// Configuration file rejected; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file (PGM, JSON index, checkpoint).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn numerics(msg: impl Into<String>) -> Self {
        Error::Numerics(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
