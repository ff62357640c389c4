use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid modality spec: {0}")]
    InvalidSpec(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite activation in block {block}: {what}")]
    NonFiniteActivation { block: usize, what: String },

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("incompatible failure: {0}")]
    IncompatibleFailure(String),

    #[error("unknown condition: {0}")]
    UnknownCondition(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSpec(_)
            | Error::Config(_)
            | Error::UnknownCondition(_)
            | Error::IncompatibleFailure(_)
            | Error::Alignment(_) => 2,
            Error::Shape(_)
            | Error::Numeric(_)
            | Error::NonFiniteActivation { .. }
            | Error::NonFiniteLoss { .. }
            | Error::UndefinedMetric(_) => 3,
            Error::VersionMismatch { .. }
            | Error::Integrity(_)
            | Error::Io { .. }
            | Error::Manifest(_) => 4,
        }
    }
}
