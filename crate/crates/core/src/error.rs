use crate::eval::TrialRecord;
use crate::linalg::CgReport;

/// Errors produced by the fitting, prediction and I/O routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Conjugate gradient hit a NaN/Inf. Carries the iteration report up to the breakdown.
    #[error("conjugate gradient breakdown after {} iterations", .0.iterations)]
    CgBreakdown(CgReport),

    /// Incomplete factorization met a zero pivot. Callers may densify or raise the drop tolerance.
    #[error("zero pivot at row {row} during incomplete LU factorization")]
    ZeroPivot { row: usize },

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("hyperparameter search failed: all {} trials errored", .0.len())]
    SearchFailed(Vec<TrialRecord>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
