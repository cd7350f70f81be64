use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DspError>;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("matrix is numerically rank deficient (column {column}, pivot {pivot:e})")]
    NumericalRank { column: usize, pivot: f64 },

    #[error("non-finite value encountered at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: &'static str },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("training labels are degenerate: need at least two classes, found {classes}")]
    DegenerateLabels { classes: usize },

    #[error("sequence too short: need at least 2 frames, got {n}")]
    SequenceTooShort { n: usize },

    #[error("gram matrix is not PSD: min eigenvalue {min_eig:e} below floor for max eigenvalue {max_eig:e}")]
    NotPsd { min_eig: f64, max_eig: f64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated input: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl DspError {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        DspError::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        DspError::Parameter(msg.into())
    }

    /// Process exit code: 2 for missing inputs, 3 for validation failures,
    /// 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            DspError::MissingInput(_) => 2,
            DspError::NumericalRank { .. } | DspError::NonFinite { .. } | DspError::NotPsd { .. } => 4,
            _ => 3,
        }
    }
}
