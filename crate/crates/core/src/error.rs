use thiserror::Error;

/// Errors raised by the analysis routines.
#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("matrix is not row-stochastic: row {row} {detail}")]
    NotStochastic { row: usize, detail: String },

    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    Convergence { iterations: usize, estimate: f64 },

    #[error("{what} of {requested} exceeds the budget of {limit}; {hint}")]
    Budget {
        what: &'static str,
        requested: usize,
        limit: usize,
        hint: &'static str,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = StabilityError> = std::result::Result<T, E>;

impl StabilityError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Domain {
            op,
            detail: detail.into(),
        }
    }
}
