//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image shapes are inconsistent with the operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument is outside the operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A data file is present but malformed; names the file and line.
    #[error("{path}:{line}: {msg}")]
    Corrupt {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file parsed but its contents do not form a valid structure.
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },

    /// Invalid run or pipeline configuration.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
