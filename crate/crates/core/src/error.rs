//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by data handling, estimation, and the nowcasting harness.
#[derive(Debug, Error)]
pub enum DfmError {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A cell of an input file failed to parse. `row` is 1-based over data
    /// rows (the header is row 0).
    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// Invalid arguments or malformed inputs (dimension mismatches,
    /// out-of-range options, inconsistent configuration).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A specific data column violates a precondition.
    #[error("column '{column}': {message}")]
    Column { column: String, message: String },

    /// A numerical operation failed (singular system, non-finite value).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl DfmError {
    /// True for failures of the numerics rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, DfmError::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, DfmError>;
