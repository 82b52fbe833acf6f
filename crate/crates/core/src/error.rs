use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its allowed range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called with inputs that violate its contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Cross references inside a corpus or checkpoint do not resolve.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite loss or gradient during training.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) => 2,
            Error::Parse { .. } | Error::Integrity(_) | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}
