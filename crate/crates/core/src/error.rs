use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the training laboratory.
#[derive(Debug, Error)]
pub enum FloodError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("label {label} outside the valid range for {num_classes} classes")]
    InvalidLabel { label: i32, num_classes: usize },

    #[error("empty dataset")]
    EmptyData,

    #[error("invalid flood level {0}: must be finite and non-negative")]
    InvalidFloodLevel(f64),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("absent checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("run failed for flood level {b} (trial {trial}): {source}")]
    RunFailed {
        b: f64,
        trial: usize,
        #[source]
        source: Box<FloodError>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl FloodError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FloodError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            FloodError::Numeric(_) => true,
            FloodError::RunFailed { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    /// True for filesystem failures.
    pub fn is_io(&self) -> bool {
        match self {
            FloodError::Io { .. } => true,
            FloodError::RunFailed { source, .. } => source.is_io(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, FloodError>;
