use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value {value} at element {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("shape mismatch: {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("valid bit count mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),

    #[error("invalid group partition: {0}")]
    Partition(String),

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("batch norm state not frozen: {0}")]
    Unfrozen(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("gradient error: {0}")]
    Gradient(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
