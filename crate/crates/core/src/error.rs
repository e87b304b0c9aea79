use crate::diffmath::MathError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("frozen parameters: {0}")]
    Frozen(String),
    #[error("KV cache: {0}")]
    Cache(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
