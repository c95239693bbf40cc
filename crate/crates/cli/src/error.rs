use lace_core::LaceError;
use thiserror::Error;

/// Failure of a subcommand, grouped by the exit code it maps to.
#[derive(Error, Debug)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("gradient mismatch: {0}")]
    GradientMismatch(String),
    #[error("output error: {0}")]
    Output(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Output(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::GradientMismatch(_) => 5,
        }
    }

    /// Errors raised while reading or preparing a dataset.
    pub fn data(e: LaceError) -> Self {
        match e {
            LaceError::NumericalFailure(m) => CliError::Numerical(m),
            other => CliError::Data(other.to_string()),
        }
    }

    /// Errors raised while building or training a model.
    pub fn run(e: LaceError) -> Self {
        match e {
            LaceError::NumericalFailure(m) => CliError::Numerical(m),
            e @ (LaceError::Io { .. } | LaceError::Format { .. }) => CliError::Data(e.to_string()),
            LaceError::InvalidArgument(m) => CliError::Config(m),
        }
    }

    pub fn output(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Output(format!("{}: {e}", path.display()))
    }
}
