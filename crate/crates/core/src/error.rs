//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between tensors or maps.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A scalar parameter is outside its valid range.
    #[error("parameter error: {0}")]
    Param(String),

    /// A configuration this artifact deliberately does not support.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Invalid run/model/training configuration.
    #[error("config error: {0}")]
    Config(String),

    /// An id (class label, palette entry) outside its table.
    #[error("range error: {0}")]
    Range(String),

    /// Inputs that leave a quantity undefined (empty matrix, all-ignored batch).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed binary file; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Misuse of the gradient tape.
    #[error("tape error: {0}")]
    Tape(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }
}
