use thiserror::Error;

/// Errors produced anywhere in the sampling engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("infeasible sample: requested {requested} locations but only {available} have positive weight")]
    InfeasibleSample { requested: usize, available: usize },

    #[error("enumeration too large: {states} states exceeds budget {budget}")]
    EnumerationTooLarge { states: u128, budget: u64 },

    #[error("impossible evidence: revealed cells have zero support under condition {0}")]
    ImpossibleEvidence(i64),

    #[error("invalid component {component:?} for condition {condition}")]
    InvalidComponent { condition: i64, component: String },

    #[error("unknown condition {0}")]
    UnknownCondition(i64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training failure: {0}")]
    TrainingFailure(String),

    #[error("undefined AUC: labels contain a single class or scores are constant")]
    UndefinedAuc,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid tiling: {0}")]
    InvalidTiling(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
