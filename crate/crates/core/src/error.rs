use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sample space mismatch")]
    SpaceMismatch,

    #[error("base distribution mismatch between subspaces")]
    BaseMismatch,

    #[error("invalid sample space: {0}")]
    InvalidSpace(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("non-positive probability {value:e} at state {state} along path (t = {t})")]
    NonPositive { state: usize, value: f64, t: f64 },

    #[error("mixture weight {0} outside [0, 1]")]
    MixtureWeight(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("no root of the estimating equation in [{lo}, {hi}]")]
    NoRoot { lo: f64, hi: f64 },

    #[error("section sampling failed after {retries} retries: {reason}")]
    SectionSampling { retries: usize, reason: String },

    #[error("model spec: {0}")]
    ModelSpec(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
