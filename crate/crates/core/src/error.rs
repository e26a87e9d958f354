use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CrasError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CrasError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("malformed header: {0}")]
    BadHeader(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CrasError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CrasError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short identifier for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            CrasError::Io { .. } => "io",
            CrasError::BadMagic { .. } => "bad-magic",
            CrasError::UnsupportedVersion(_) => "bad-version",
            CrasError::BadHeader(_) => "bad-header",
            CrasError::Length { .. } => "bad-length",
            CrasError::NonFinite { .. } => "non-finite",
            CrasError::Shape(_) => "shape",
            CrasError::Config(_) => "config",
            CrasError::Manifest(_) => "manifest",
            CrasError::ZeroNorm(_) => "zero-norm",
            CrasError::Empty(_) => "empty",
            CrasError::Diverged { .. } => "diverged",
            CrasError::NonFiniteLoss(_) => "non-finite-loss",
            CrasError::Metric(_) => "metric",
            CrasError::Json(_) => "json",
        }
    }

    /// Errors caused by user input rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CrasError::Config(_) | CrasError::Manifest(_) | CrasError::Json(_)
        )
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> CrasError {
    CrasError::Shape(msg.into())
}
