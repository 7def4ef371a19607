use std::path::PathBuf;

use mscl_autodiff::AutodiffError;
use mscl_metrics::MetricsError;
use mscl_segment::SegmentError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: bad checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("incompatible checkpoint: {0}")]
    Compat(String),
    #[error("non-finite {term} at epoch {epoch}, batch {batch}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        batch: usize,
    },
}

impl CoreError {
    /// Short machine-readable class used in single-line CLI diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            CoreError::Autodiff(_) => "autodiff",
            CoreError::Segment(SegmentError::Io { .. } | SegmentError::Png { .. }) => "io",
            CoreError::Segment(SegmentError::Backend { .. }) => "backend",
            CoreError::Segment(SegmentError::Config(_)) => "config",
            CoreError::Segment(_) => "segment",
            CoreError::Metrics(MetricsError::Io { .. }) => "io",
            CoreError::Metrics(MetricsError::Parse { .. }) => "schema",
            CoreError::Metrics(_) => "metrics",
            CoreError::Config(_) => "config",
            CoreError::Input(_) => "input",
            CoreError::Io { .. } => "io",
            CoreError::Schema { .. } => "schema",
            CoreError::Checkpoint { .. } => "checkpoint",
            CoreError::Compat(_) => "compat",
            CoreError::NonFinite { .. } => "nonfinite",
        }
    }

    /// I/O failure on `path`.
    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CoreError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}
