use dynframe::Error;

/// Command failure, classified by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("property violation: {0}")]
    Violation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Violation(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let text = e.to_string();
        match e {
            Error::Config { .. } | Error::InvalidArgument(_) => CliError::Usage(text),
            Error::Parse { .. } | Error::Record { .. } | Error::Io(_) | Error::Json(_) | Error::Geometry(_) => {
                CliError::Data(text)
            }
            Error::Numeric(_)
            | Error::NonFinite { .. }
            | Error::Shape { .. }
            | Error::UnknownNode(_)
            | Error::UnboundInput(_) => CliError::Numeric(text),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
