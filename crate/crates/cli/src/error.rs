use thiserror::Error;

/// Failure of a CLI run; each variant maps to one exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("algorithm error: {0}")]
    Algorithm(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Algorithm(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    /// Wraps a library error raised while `module` was running.
    pub fn algorithm(module: &str) -> impl Fn(smc_core::SmcError) -> CliError + '_ {
        move |e| CliError::Algorithm(format!("{module}: {e}"))
    }
}
