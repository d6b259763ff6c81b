use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix has no nonzero row")]
    ZeroMatrix,

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error(
        "public pool exhausted: IBS block {requested} needs {needed} samples but the pool has {available}; \
         enlarge the public pool or switch the segmentation strategy to rbs"
    )]
    PoolExhausted {
        requested: usize,
        needed: usize,
        available: usize,
    },

    #[error("privacy budget exceeded: epsilon {spent:.4} > cap {cap:.4} at step {step}")]
    BudgetExceeded { spent: f64, cap: f64, step: usize },

    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated IDX file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
