use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor or model dimensions do not line up.
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A numeric argument lies outside its allowed range.
    #[error("value out of range: {0}")]
    Range(String),
    /// Malformed serialized data.
    #[error("format error: {0}")]
    Format(String),
    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
