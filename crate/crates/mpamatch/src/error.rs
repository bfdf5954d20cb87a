use thiserror::Error;

/// Crate-wide error type. Variants map onto process exit codes in the CLI:
/// config errors exit 2, data errors exit 3, numeric aborts exit 4.
#[derive(Debug, Error)]
pub enum MpaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric abort: non-finite {component} at step {step}")]
    Numeric { component: String, step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MpaError>;

impl MpaError {
    pub fn shape(msg: impl Into<String>) -> Self {
        MpaError::Shape(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        MpaError::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        MpaError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        MpaError::Data(msg.into())
    }

    /// Exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            MpaError::Config(_) => 2,
            MpaError::Data(_) => 3,
            MpaError::Numeric { .. } => 4,
            _ => 1,
        }
    }
}
