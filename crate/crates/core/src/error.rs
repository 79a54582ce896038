use thiserror::Error;

/// Errors produced anywhere in the codec, model and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("quantizer scale must be positive and finite, got {0}")]
    InvalidScale(f32),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("latent value {value} outside coder alphabet [{lo}, {hi}]")]
    AlphabetOverflow { value: i64, lo: i32, hi: i32 },

    #[error("truncated stream")]
    Truncated,

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("model checksum mismatch: container has {expected:016x}, model is {found:016x}")]
    ChecksumMismatch { expected: u64, found: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
