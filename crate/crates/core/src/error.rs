use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("finite-difference oracle produced a non-finite value at coordinate {coord}")]
    Oracle { coord: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error in {field}: {msg}")]
    Parse { field: String, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn parse(field: impl Into<String>, msg: impl ToString) -> Self {
        Error::Parse {
            field: field.into(),
            msg: msg.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
