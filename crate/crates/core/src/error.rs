use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate attention row (query {0} has no unmasked key)")]
    DegenerateAttention(usize),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("malformed {format} data: {msg}")]
    Format { format: &'static str, msg: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
