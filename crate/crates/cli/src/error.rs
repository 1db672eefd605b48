use qskd_core::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 2 for anything the user can fix in the configuration or inputs, 3 when
    /// the numbers blew up, 1 for internal faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(Error::Shape { .. } | Error::Axis { .. } | Error::Contract(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}
