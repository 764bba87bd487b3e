use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for {len} nodes")]
    Index { index: usize, len: usize },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("instance too large for exhaustive search: {customers} customers (limit {limit})")]
    SizeGuard { customers: usize, limit: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
