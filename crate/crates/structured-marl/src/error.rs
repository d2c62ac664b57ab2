use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coupling graph: {0}")]
    InvalidGraph(String),
    #[error("horizon mismatch: {0}")]
    HorizonMismatch(String),
    #[error("unknown node: {0}")]
    UnknownNode(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("enumeration of {size} entries exceeds cap {cap}")]
    CapExceeded { size: u128, cap: u128 },
    #[error("unknown builtin configuration `{0}`")]
    UnknownConfig(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("unknown suite `{0}`")]
    UnknownSuite(String),
    #[error("action contract violated: {0}")]
    InvalidAction(String),
    #[error("replay holds {have} transitions, batch needs {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("non-finite value detected: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
