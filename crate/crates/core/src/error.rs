use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AuditError>;

/// Errors raised by the auditing library.
///
/// Variants are grouped into the classes the CLI maps onto exit codes via
/// [`AuditError::class`].
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("verification failed for `{formula}`: {detail}")]
    Verification { formula: String, detail: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("degenerate binning: {0}")]
    DegenerateBinning(String),

    #[error("parse error in {path} at line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse error classes, one per CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Capacity,
    Divergence,
    Verification,
}

impl AuditError {
    pub fn class(&self) -> ErrorClass {
        match self {
            AuditError::Capacity(_) => ErrorClass::Capacity,
            AuditError::Divergence { .. } => ErrorClass::Divergence,
            AuditError::Verification { .. } => ErrorClass::Verification,
            _ => ErrorClass::Config,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AuditError::Io {
            path: path.into(),
            source,
        }
    }
}
