use num_complex::Complex64;
use thiserror::Error;

use crate::adaptive::AdaptStep;
use crate::report::SolverReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// What an iterative solver had when it gave up.
#[derive(Debug, Clone, Default)]
pub struct PartialState {
    /// Best iterate (linear solvers).
    pub iterate: Vec<Complex64>,
    /// Per-band residual norms (eigensolver) or the residual history (linear solvers).
    pub residuals: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged {
        what: String,
        iterations: usize,
        residual: f64,
        partial: Box<PartialState>,
    },

    #[error("degenerate shift: {0}")]
    DegenerateShift(String),

    #[error("invalid shift: {0}")]
    InvalidShift(String),

    #[error("extra-band budget exhausted after {added} added bands (xi = {xi:.4})")]
    BudgetExhausted {
        added: usize,
        xi: f64,
        trace: Vec<AdaptStep>,
    },

    #[error("response failed: {source}")]
    ResponseFailed {
        #[source]
        source: Box<Error>,
        reports: Vec<SolverReport>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of an iterative method (as opposed to bad input).
    pub fn is_convergence_failure(&self) -> bool {
        match self {
            Error::NotConverged { .. } => true,
            Error::ResponseFailed { source, .. } => source.is_convergence_failure(),
            _ => false,
        }
    }
}
