//! Error type shared by every module in the crate.

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input data violates a precondition (empty signal, zero energy, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// Two operands do not agree in shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Data became non-finite or otherwise unusable mid-computation.
    #[error("invalid data: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;
