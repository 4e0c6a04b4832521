use std::fmt;

/// Failure class, mapped onto the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    /// Bad input, config or run-directory state.
    Input,
    /// Training diverged or otherwise failed.
    Training,
    /// An external service (the remote judge) could not be reached.
    External,
}

impl Failure {
    pub fn exit_code(self) -> u8 {
        match self {
            Failure::Input => 2,
            Failure::Training => 3,
            Failure::External => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub failure: Failure,
    pub error: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Tag any error with its failure class.
pub trait ResultExt<T> {
    fn fail_as(self, failure: Failure) -> CliResult<T>;

    fn input(self) -> CliResult<T>
    where
        Self: Sized,
    {
        self.fail_as(Failure::Input)
    }

    fn training(self) -> CliResult<T>
    where
        Self: Sized,
    {
        self.fail_as(Failure::Training)
    }

    fn external(self) -> CliResult<T>
    where
        Self: Sized,
    {
        self.fail_as(Failure::External)
    }
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn fail_as(self, failure: Failure) -> CliResult<T> {
        self.map_err(|e| CliError {
            failure,
            error: e.into(),
        })
    }
}

pub fn input_error(message: impl fmt::Display) -> CliError {
    CliError {
        failure: Failure::Input,
        error: anyhow::anyhow!("{message}"),
    }
}
