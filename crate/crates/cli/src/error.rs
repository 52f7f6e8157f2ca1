use pnacc_core::CoreError;
use pnacc_velodyne::VelodyneError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable or malformed input.
    #[error("{0}")]
    Format(String),
    /// Weights do not fit the selected network.
    #[error("{0}")]
    Mismatch(String),
    /// More points than the accelerator accepts.
    #[error("{0}")]
    Capacity(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Format(_) => 2,
            CliError::Mismatch(_) => 3,
            CliError::Capacity(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Format(e.to_string())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Capacity(_) => CliError::Capacity(e.to_string()),
            CoreError::Binding(_) | CoreError::Shape(_) | CoreError::Validation(_) | CoreError::WeightStore(_) => {
                CliError::Mismatch(e.to_string())
            }
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<VelodyneError> for CliError {
    fn from(e: VelodyneError) -> Self {
        CliError::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
