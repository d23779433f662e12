use std::path::PathBuf;

use controlsr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value failed a documented precondition; `what` names the offending key or argument.
    #[error("invalid {what}: {reason}")]
    Validation { what: String, reason: String },
    #[error("parse error in {context} at offset {offset}: {reason}")]
    Parse { context: String, offset: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn validation(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation { what: what.into(), reason: reason.into() }
    }

    pub fn parse(context: impl Into<String>, offset: usize, reason: impl Into<String>) -> Self {
        Error::Parse { context: context.into(), offset, reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 1 for bad input, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Parse { .. } | Error::Usage(_) => 1,
            Error::Io { .. } | Error::Tensor(_) => 2,
        }
    }
}
