use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },

    /// Input file decoded fine but has the wrong pixel format.
    #[error("{0}")]
    Format(String),

    #[error("domain mismatch: expected {expected} image, found {found}")]
    DomainMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate band: {0} is empty")]
    DegenerateBand(&'static str),

    #[error("mask has no shadow boundary")]
    NoBoundary,

    #[error("{what}: need at least {needed} pixels, found {found}")]
    TooFewPixels {
        what: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    Fingerprint { expected: u64, found: u64 },

    #[error("model mismatch: {0}")]
    Model(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("backward called without a matching train-mode forward")]
    BackwardWithoutForward,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss; `record` is the offending step.
    #[error("numerical abort at iteration {iteration}: {record}")]
    NumericalAbort { iteration: usize, record: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
