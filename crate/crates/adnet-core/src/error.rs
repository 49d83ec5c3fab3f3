//! Error taxonomy shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or extent mismatch. Carries the offending extents.
    #[error("dimension error: {context} (got {got:?}, expected {expected})")]
    Dimension {
        context: String,
        got: Vec<usize>,
        expected: String,
    },

    /// A scalar hyperparameter or argument is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller violated an API contract (non-scalar loss, NaN input, empty list).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite value where a finite one is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Payload does not fit the requested QR version / error-correction level.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Malformed file content. `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Well-formed file that is incompatible with what the caller asked for.
    #[error("incompatible {field}: {message}")]
    Incompatible { field: String, message: String },

    /// Threshold calibration cannot proceed (an LV class is empty).
    #[error("calibration error: {0}; enlarge the calibration set")]
    Calibration(String),

    /// Missing executable, unreadable path, or other environment problem.
    #[error("environment error: {0}")]
    Environment(String),

    /// Manifest references files that do not exist or fails validation.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Training diverged; the last good checkpoint is at `last_good`.
    #[error("training diverged at iteration {iteration}; last good checkpoint: {last_good:?}")]
    Diverged {
        iteration: u64,
        last_good: Option<PathBuf>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(context: impl Into<String>, got: &[usize], expected: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            got: got.to_vec(),
            expected: expected.into(),
        }
    }

    /// Short machine-parsable category tag, used by the CLI's error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "nonfinite",
            Error::Capacity(_) => "capacity",
            Error::Format { .. } => "format",
            Error::Incompatible { .. } => "incompatible",
            Error::Calibration(_) => "calibration",
            Error::Environment(_) => "environment",
            Error::Manifest(_) => "manifest",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }
}
