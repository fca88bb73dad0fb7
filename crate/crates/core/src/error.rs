use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("turn {qid} references unknown passage {pid}")]
    DanglingPassage { qid: String, pid: String },

    #[error("turn {qid}: {message}")]
    InvalidAnswer { qid: String, message: String },

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("positive passage {0} is not among the candidates")]
    PositiveAbsent(String),

    #[error("passage {0} is not in the index")]
    UnknownPassage(String),

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("bad artifact {path}: {message}")]
    BadArtifact { path: PathBuf, message: String },

    #[error("non-finite loss at iteration {iteration}: {dump}")]
    NonFiniteLoss { iteration: u64, dump: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
