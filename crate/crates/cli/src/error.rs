use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] attnguide::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 usage, 3 numeric failure, 4 IO, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use attnguide::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 4,
            CliError::Core(e) => match e {
                E::Parameter(_) | E::Json(_) => 2,
                E::Numeric(_) | E::NonFinite { .. } => 3,
                E::Io(_) => 4,
                E::Dimension { .. } | E::Contract(_) | E::Internal(_) => 1,
            },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("bad config: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
