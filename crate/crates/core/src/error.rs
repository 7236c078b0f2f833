use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing prerequisite {path}: {hint}")]
    MissingPrerequisite { path: PathBuf, hint: String },

    #[error("non-finite value in sample {sample_id}: {message}")]
    Numerical { sample_id: String, message: String },

    #[error("cosine similarity is undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::MissingPrerequisite { .. } => 3,
            Error::Numerical { .. } => 4,
            _ => 1,
        }
    }
}
