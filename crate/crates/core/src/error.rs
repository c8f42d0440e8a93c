//! Crate-wide error taxonomy.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatches between tensors or declared shapes.
    #[error("shape error: {0}")]
    Shape(String),
    /// API misuse: backward on a non-scalar, mixing tapes, and the like.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid argument values (bad index, bad label, mismatched lengths).
    #[error("input error: {0}")]
    Input(String),
    /// Invalid configuration (unknown keys, inconsistent model settings).
    #[error("config error: {0}")]
    Config(String),
    /// Operation attempted before required state exists (unfitted stats,
    /// optimizer state mismatch).
    #[error("state error: {0}")]
    State(String),
    /// Dataset-level problems: schema mismatches, bad rows, degenerate
    /// features.
    #[error("data error: {0}")]
    Data(String),
    /// Malformed binary artifacts (volumes, checkpoints).
    #[error("format error: {0}")]
    Format(String),
    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
