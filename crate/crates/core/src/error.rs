use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown region label {0}")]
    UnknownLabel(i32),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: [usize; 3], actual: [usize; 3] },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("expected {expected} coefficients, got {actual}")]
    Arity { expected: usize, actual: usize },

    #[error("cardinality error: {values} values cannot fill {cells} cells")]
    Cardinality { values: usize, cells: usize },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
