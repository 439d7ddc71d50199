use std::process::ExitCode;

use sipit_core::Error;

/// Failure classes with their process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input file, flag or configuration.
    #[error("{0}")]
    Input(String),
    /// A checked property did not hold.
    #[error("{0}")]
    Invariant(String),
    /// An inversion could not recover every prompt.
    #[error("{0}")]
    Recovery(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Input(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Recovery(_) => 4,
        })
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => CliError::Invariant(e.to_string()),
            Error::Exhausted { .. } | Error::NoVerifiedToken { .. } | Error::Ambiguous { .. } => {
                CliError::Recovery(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
