use std::fmt;

/// Exit codes: 1 usage, 2 data, 3 remote aggregator.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(kp_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use kp_core::Error;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_remote() => 3,
            CliError::Core(Error::Config(_) | Error::NonTransferable(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<kp_core::Error> for CliError {
    fn from(e: kp_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
