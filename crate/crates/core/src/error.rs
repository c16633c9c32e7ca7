use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or image shapes.
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A NaN or infinity reached a checked point (loss, posterior, ...).
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Factorization or other numerical routine failed.
    #[error("numerical failure: {0}")]
    Numeric(String),
    /// Malformed serialized tensor or model.
    #[error("format error: {0}")]
    Format(String),
    /// Dataset or image problems, usually carrying the offending path.
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
