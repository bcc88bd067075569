use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("token {token} has dimension {got}, expected {expected}")]
    BadToken {
        token: usize,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range (limit {limit}) in {context}")]
    IndexOutOfRange {
        context: String,
        index: usize,
        limit: usize,
    },

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("design matrix is rank deficient (condition estimate {cond:.3e})")]
    RankDeficient { cond: f64 },

    #[error("capacity violated: {constraint}")]
    Capacity { constraint: String },

    #[error("invalid margin schedule: {0}")]
    InvalidSchedule(String),

    #[error("unknown model '{0}'")]
    UnknownModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
