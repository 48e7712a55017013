use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid covariate matrix: {0}")]
    Covariates(String),

    #[error("allocation is unbalanced: {plus} treated vs {minus} control")]
    Unbalanced { plus: usize, minus: usize },

    #[error("allocation entries must be +1 or -1, found {0}")]
    BadSign(i8),

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("invalid blocking: {0}")]
    Blocking(String),

    #[error("invalid design: {0}")]
    Design(String),

    #[error("invalid outcomes: {0}")]
    Outcomes(String),

    #[error("mean {mean} is outside the support of the {kind} response")]
    MeanOutOfRange { kind: &'static str, mean: f64 },

    #[error("matching instance with {size} subjects exceeds exact capacity {capacity}; use the heuristic matcher")]
    Capacity { size: usize, capacity: usize },

    #[error("design support has {size} allocations, above the enumeration limit {limit}")]
    SupportTooLarge { size: u128, limit: u128 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// `line` is 1-based; 0 means the problem is not tied to one line.
    #[error("{}", config_message(*line, message))]
    Config { line: usize, message: String },
}

fn config_message(line: usize, message: &str) -> String {
    if line == 0 {
        format!("config: {message}")
    } else {
        format!("config line {line}: {message}")
    }
}

pub type Result<T> = std::result::Result<T, Error>;
