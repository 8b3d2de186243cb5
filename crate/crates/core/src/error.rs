use thiserror::Error;

use crate::train::MetricsHistory;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("invalid rank {r}: must lie in [1, {max}]")]
    InvalidRank { r: usize, max: usize },

    #[error("matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("initialization of layer `{0}` requires an input covariance")]
    MissingCovariance(String),

    #[error("infeasible rank budget: {0}")]
    InfeasibleBudget(String),

    #[error("importance scores sum to zero; allocation is undefined")]
    DegenerateImportance,

    #[error("A·C·Aᵀ is singular")]
    SingularGram,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Training hit a non-finite loss or gradient. The rows recorded up to
    /// (and excluding) `step` are kept.
    #[error("training diverged at step {step}")]
    Diverged { step: usize, history: Box<MetricsHistory> },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl LabError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LabError::InvalidInput(msg.into())
    }

    /// True for failures that come from the arithmetic rather than from the
    /// caller's inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LabError::NumericalFailure(_)
                | LabError::Diverged { .. }
                | LabError::NotPsd { .. }
                | LabError::SingularGram
        )
    }
}
