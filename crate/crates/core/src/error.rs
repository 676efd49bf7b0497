use thiserror::Error;

/// Errors produced by model construction, fitting, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{context}: matrix is not symmetric (max relative asymmetry {max_asym:.3e})")]
    NotSymmetric { context: String, max_asym: f64 },

    #[error("{context}: matrix is not positive definite")]
    NotPositiveDefinite { context: String },

    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line search failed after {halvings} step halvings (objective {objective:.6e})")]
    LineSearchFailed { halvings: u32, objective: f64 },

    #[error("design matrix is rank deficient or ill conditioned")]
    RankDeficient,

    #[error("class {class} has {count} assigned rows; at least {min} are required")]
    DegenerateLabels { class: usize, count: usize, min: usize },

    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },

    #[error("label matching is exhaustive and supports at most {max} classes, got {got}")]
    TooManyClasses { got: usize, max: usize },

    #[error("AICc needs n > df + 1 (n = {n}, df = {df})")]
    AiccUndefined { n: usize, df: usize },

    #[error("k-means could not produce {k} nonempty clusters from {n} rows")]
    EmptyCluster { k: usize, n: usize },

    #[error("invalid parameter file: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, Error>;
