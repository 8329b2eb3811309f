use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("gradient oracle failure: {0}")]
    Oracle(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("checkpoint migration error: found version {found}, expected {expected}")]
    Migration { found: u32, expected: u32 },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("i/o error on {path}: {source}")]
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

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            message: message.into(),
        }
    }

    /// Short category name, used by the CLI for reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::RejectedInput(_) => "rejected-input",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Sampling(_) => "sampling",
            Error::Generation(_) => "generation",
            Error::Oracle(_) => "oracle",
            Error::Internal(_) => "internal",
            Error::Migration { .. } => "migration",
            Error::NonFinite { .. } => "non-finite",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for this error class. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::RejectedInput(_) => 2,
            Error::Parse { .. } => 3,
            Error::Schema(_) => 4,
            Error::Sampling(_) => 5,
            Error::Generation(_) => 6,
            Error::Oracle(_) => 7,
            Error::Internal(_) => 8,
            Error::Migration { .. } => 9,
            Error::NonFinite { .. } => 10,
            Error::Io { .. } => 11,
        }
    }
}
