use qbe_gradkit::GradError;
use thiserror::Error;

pub type Result<T, E = QbeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QbeError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("feature dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error(transparent)]
    Grad(#[from] GradError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QbeError {
    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            QbeError::Config(_) => 2,
            QbeError::Numeric(_) => 4,
            QbeError::Grad(GradError::NonFinite { .. }) => 4,
            _ => 3,
        }
    }
}
