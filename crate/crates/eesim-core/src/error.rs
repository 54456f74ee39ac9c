use alloc::string::String;

/// Errors surfaced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid format: {0}")]
    InvalidFormat(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("deadline already missed: elapsed {elapsed_s}s >= target {target_s}s")]
    DeadlineMissed { target_s: f64, elapsed_s: f64 },
    #[error("token index {token} out of range (vocab {vocab})")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("corrupt data: {0}")]
    CorruptData(String),
}

pub type Result<T> = core::result::Result<T, CoreError>;
