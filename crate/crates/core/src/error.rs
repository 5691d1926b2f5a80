use std::io;

use thiserror::Error;

/// Errors surfaced by the codec library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("model mismatch: {0}")]
    Compatibility(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("slice {index}: {source}")]
    Slice { index: usize, source: Box<Error> },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn decode(msg: impl Into<String>) -> Self {
        Error::Decode(msg.into())
    }

    pub(crate) fn at_slice(self, index: usize) -> Self {
        match self {
            e @ Error::Slice { .. } => e,
            e => Error::Slice { index, source: Box::new(e) },
        }
    }

    /// The innermost error, skipping slice-index wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Slice { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures caused by the model/checkpoint rather than the data.
    pub fn is_model_error(&self) -> bool {
        matches!(self.root(), Error::Compatibility(_) | Error::Config(_) | Error::Shape(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
