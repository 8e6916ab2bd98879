use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Validation,
    Data,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no usable training instances: {skipped} of {total} skipped")]
    NoUsableInstances { skipped: usize, total: usize },

    #[error("no snippets available for question {0:?}")]
    RetrievalMiss(String),

    #[error("image pool exhausted for entity {entity:?}: {deficit} more image(s) needed")]
    PoolExhausted { entity: String, deficit: usize },

    #[error("{0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Validation { .. } | Error::Config(_) | Error::InvalidArgument(_) => {
                ErrorKind::Validation
            }
            Error::Parse { .. }
            | Error::Domain(_)
            | Error::NoUsableInstances { .. }
            | Error::RetrievalMiss(_)
            | Error::PoolExhausted { .. }
            | Error::Data(_)
            | Error::Io { .. } => ErrorKind::Data,
            Error::Json(_) => ErrorKind::Internal,
        }
    }
}
