//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// NaN/Inf produced, overflow, or a statistic that is undefined
    /// (e.g. single-class labels, no events in a survival group).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A file does not conform to its declared layout (bad magic,
    /// truncation, malformed CSV cell, ...).
    #[error("format error: {0}")]
    Format(String),
    /// Inputs are structurally valid but inconsistent with each other
    /// (unknown image id, overlapping splits, label width mismatch, ...).
    #[error("data error: {0}")]
    Data(String),
    /// Invalid configuration or generator spec.
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
