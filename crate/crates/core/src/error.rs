use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema corruption: {0}")]
    SchemaCorruption(String),

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("integrity check failed for {0}")]
    Integrity(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("non-finite loss in task `{task}` at epoch {epoch}")]
    NumericFailure { task: String, epoch: usize },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::ShapeMismatch { .. } => 2,
            Error::SchemaCorruption(_)
            | Error::CorruptDataset(_)
            | Error::UnsupportedVersion { .. }
            | Error::Integrity(_)
            | Error::Io { .. }
            | Error::Json(_) => 3,
            Error::NumericFailure { .. } | Error::InvalidState(_) | Error::InvariantViolation(_) => 4,
        }
    }
}
