use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the mapping engine.
#[derive(Debug, Error)]
pub enum MapError {
    /// Model, config, or scenario description that cannot be constructed.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A loss term, gradient, or update produced NaN/Inf.
    #[error("numerical failure in {term}: value {value}")]
    Numerical { term: String, value: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("records are not comparable: {0}")]
    Incomparable(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MapError {
    pub fn numerical(term: impl Into<String>, value: f64) -> Self {
        MapError::Numerical {
            term: term.into(),
            value,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MapError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            MapError::Numerical { .. } => 3,
            MapError::Config(_) | MapError::Format { .. } | MapError::Dimension(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = MapError> = std::result::Result<T, E>;

/// Fails with a numerical error when `value` is NaN or infinite.
pub(crate) fn ensure_finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(MapError::numerical(term, value))
    }
}
