use thiserror::Error;

use crate::mdp::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("row {state} of {what} is not a distribution (sum {sum})")]
    NotStochastic {
        what: &'static str,
        state: usize,
        sum: f64,
    },

    #[error("policy row {state} is fully lazy; the non-lazy conditional is undefined")]
    UndefinedRow { state: usize },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("invalid MDP:\n{0}")]
    InvalidMdp(ValidationReport),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),

    #[error("malformed document: {0}")]
    Document(String),

    #[error("at eta = {eta}: {source}")]
    AtEta {
        eta: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            found,
        }
    }

    /// True for numerical non-convergence, possibly wrapped in an eta annotation.
    pub fn is_non_convergence(&self) -> bool {
        match self {
            Error::NonConvergence { .. } => true,
            Error::AtEta { source, .. } => source.is_non_convergence(),
            _ => false,
        }
    }
}
