use std::fmt;
use std::process::ExitCode;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid flags or config values (exit 2).
    Flag(String),
    /// Missing, unreadable or inconsistent files (exit 3).
    Data(String),
    /// Numeric breakdown during training or evaluation (exit 4).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Flag(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        })
    }

    /// Reclassify argument errors as data errors, for calls whose arguments
    /// come from files rather than flags.
    pub fn data(e: cmpc_core::Error) -> Self {
        match e {
            cmpc_core::Error::Argument(m) => CliError::Data(m),
            other => other.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Flag(m) => write!(f, "invalid arguments: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<cmpc_core::Error> for CliError {
    fn from(e: cmpc_core::Error) -> Self {
        use cmpc_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Argument(m) => CliError::Flag(m),
            E::Shape(_) | E::Load(_) | E::Io { .. } | E::Json(_) => CliError::Data(msg),
            E::Numeric(_) | E::Training { .. } | E::Degenerate(_) | E::State(_) => CliError::Numeric(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
