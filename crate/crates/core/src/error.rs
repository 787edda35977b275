use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN/Inf or a solver that failed to converge.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A precondition on argument values was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An API was used out of sequence (e.g. a consumed tape).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path} at byte offset {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("unsupported format version {found} (expected {expected}) in {what}")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the command-line front end; 1 is reserved for
    /// failed checks.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Parse { .. } | Error::Version { .. } | Error::Json(_) => 3,
            Error::Io { .. } => 4,
            Error::Shape(_) | Error::Numeric(_) | Error::Contract(_) => 5,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            message: msg.into(),
        }
    }
}
