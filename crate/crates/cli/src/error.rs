use std::fmt;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, flags or checkpoint/config mismatch (exit 1).
    Validation(anyhow::Error),
    /// Data, I/O or numeric failure during a run (exit 2).
    Runtime(anyhow::Error),
    /// A check ran but missed its threshold (exit 3).
    Threshold(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Threshold(_) => 3,
        }
    }

    pub fn validation(msg: impl fmt::Display) -> Self {
        Failure::Validation(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(e) => write!(f, "invalid input: {e:#}"),
            Failure::Runtime(e) => write!(f, "run failed: {e:#}"),
            Failure::Threshold(msg) => write!(f, "check failed: {msg}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<hagroute_core::Error> for Failure {
    fn from(e: hagroute_core::Error) -> Self {
        match e {
            hagroute_core::Error::InvalidConfig { .. } => Failure::Validation(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, Failure>;
