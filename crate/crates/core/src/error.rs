//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent disagreement between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A view would reach outside its backing buffer.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// NaN/∞ where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse (wrong call order, unsupported operand layout, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Stream state inconsistent with the requested operation.
    #[error("state error: {0}")]
    State(String),

    /// A table or cache is too small for the requested geometry.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// An attention mask leaves a query row with nothing to attend to.
    #[error("mask error: {0}")]
    Mask(String),

    /// Malformed file content.
    #[error("format error: {0}")]
    Format(String),

    /// Benchmark could not produce trustworthy numbers.
    #[error("benchmark error: {0}")]
    Bench(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI maps this error to: 2 for usage/format/config
    /// problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Format(_) => 2,
            _ => 1,
        }
    }
}
