use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SegmentError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{what} out of range: {value}")]
    Range { what: &'static str, value: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("run-length counts sum to {sum}, expected {size}")]
    RleFormat { sum: usize, size: usize },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: png: {message}")]
    Png { path: PathBuf, message: String },
    #[error("{path}: manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },
}
