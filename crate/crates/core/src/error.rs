use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("class {class} has {count} representations, at least 2 are required")]
    DegenerateClass { class: usize, count: usize },

    #[error("entropy undefined: frequencies sum to zero")]
    UndefinedEntropy,

    #[error("invalid mixing measure: {0}")]
    InvalidMeasure(String),

    #[error("least-squares fit failed: {0}")]
    FitFailure(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
