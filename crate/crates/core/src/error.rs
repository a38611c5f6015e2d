use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("input domain: {0}")]
    InputDomain(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training failed: accuracy {achieved:.4} below target {target:.4} after {epochs} epochs")]
    TrainingFailed {
        achieved: f64,
        target: f64,
        epochs: usize,
    },

    #[error("format error at offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
