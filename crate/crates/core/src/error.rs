use thiserror::Error;

pub type Result<T> = std::result::Result<T, TestaError>;

#[derive(Debug, Error)]
pub enum TestaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("reduction count {r} out of range for {n} tokens (allowed {min}..={max})")]
    ReductionRange {
        r: usize,
        n: usize,
        min: usize,
        max: usize,
    },

    #[error("stale merge plan: {0}")]
    StalePlan(String),

    #[error("oracle refuses {n} tokens (limit {limit})")]
    OracleTooLarge { n: usize, limit: usize },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("trajectory integrity: {0}")]
    Integrity(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TestaError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TestaError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
