use std::io;
use thiserror::Error;

/// Errors surfaced by the fusion library.
#[derive(Error, Debug)]
pub enum Error {
    /// An argument violated a documented precondition (shape/spec mismatch, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index or coordinate fell outside its valid range.
    #[error("out of range: {0}")]
    Range(String),

    /// Input data carried an invalid value (unknown label id, malformed scene).
    #[error("invalid data: {0}")]
    Data(String),

    /// A serialized volume or bundle failed to parse.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
