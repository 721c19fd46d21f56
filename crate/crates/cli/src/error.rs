use std::fmt;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or malformed config, missing inputs.
    Usage(String),
    /// Input files whose contents do not have the expected format.
    Format(String),
    Core(analogy_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Format(_) => EXIT_VALIDATION,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_VALIDATION,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Format(m) => write!(f, "format error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<analogy_core::Error> for CliError {
    fn from(e: analogy_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
