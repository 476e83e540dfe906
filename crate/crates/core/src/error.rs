//! Error type shared by every engine module.

use thiserror::Error;

use crate::trial_model::ValidationReport;

pub type Result<T> = std::result::Result<T, LagoError>;

#[derive(Debug, Error)]
pub enum LagoError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(ValidationReport),

    #[error("line {line}, column `{column}`: {message}")]
    Parse {
        line: u64,
        column: String,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("design matrix is rank deficient at column `{column}`")]
    RankDeficient { column: String },

    #[error("outcome has no variation: {0}")]
    NoOutcomeVariation(String),

    #[error("logistic fit did not converge after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        last_iterate: Vec<f64>,
    },

    #[error("complete separation suspected: coefficient for `{column}` reached {value:.3}")]
    Separation { column: String, value: f64 },

    #[error("dose grid has {size} packages, above the cap of {cap}; use a coarser step")]
    GridTooLarge { size: u128, cap: u64 },

    #[error("dose grid is empty")]
    EmptyGrid,

    #[error("no next stage: stage {completed} of {num_stages} already completed")]
    NoNextStage { completed: usize, num_stages: usize },

    #[error("comparison group `{0}` has no clusters")]
    EmptyGroup(String),

    #[error("group `{group}` has {clusters} cluster(s); at least {required} needed")]
    TooFewClusters {
        group: String,
        clusters: usize,
        required: usize,
    },

    #[error("{0}")]
    Precondition(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl LagoError {
    /// Stable machine-readable tag for this error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            LagoError::InvalidConfig(_) => "invalid_config",
            LagoError::Parse { .. } => "parse",
            LagoError::Io(_) => "io",
            LagoError::DimensionMismatch { .. } => "dimension_mismatch",
            LagoError::Domain(_) => "domain",
            LagoError::RankDeficient { .. } => "rank_deficient",
            LagoError::NoOutcomeVariation(_) => "no_outcome_variation",
            LagoError::NonConvergence { .. } => "non_convergence",
            LagoError::Separation { .. } => "separation",
            LagoError::GridTooLarge { .. } => "grid_too_large",
            LagoError::EmptyGrid => "empty_grid",
            LagoError::NoNextStage { .. } => "no_next_stage",
            LagoError::EmptyGroup(_) => "empty_group",
            LagoError::TooFewClusters { .. } => "too_few_clusters",
            LagoError::Precondition(_) => "precondition",
            LagoError::Serialization(_) => "serialization",
        }
    }
}

impl From<serde_json::Error> for LagoError {
    fn from(err: serde_json::Error) -> Self {
        LagoError::Serialization(err.to_string())
    }
}
