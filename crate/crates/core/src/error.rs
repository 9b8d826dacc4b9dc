use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    #[error("spacing mismatch: {left:?} vs {right:?}")]
    SpacingMismatch { left: [f64; 3], right: [f64; 3] },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("non-finite value at linear index {index}")]
    NonFinite { index: usize },

    #[error("malformed array header: {0}")]
    MalformedHeader(String),

    #[error("unsupported element type `{0}`")]
    UnsupportedDtype(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("lesion placement failed after {attempts} attempts: {reason}")]
    Placement { attempts: usize, reason: String },

    #[error("non-finite {term} at step {step}")]
    NonFiniteLoss { step: usize, term: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
