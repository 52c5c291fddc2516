use std::process::ExitCode;

/// Exit status 1 for bad input, 2 for failures while running.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Validation(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
        }
    }
}

impl From<stenosis_core::Error> for CliError {
    fn from(e: stenosis_core::Error) -> Self {
        use stenosis_core::Error as E;
        match e {
            E::Io { .. } | E::MissingCache => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<stenosis_service::StoreError> for CliError {
    fn from(e: stenosis_service::StoreError) -> Self {
        use stenosis_service::StoreError as S;
        match e {
            S::Io { .. } => CliError::Runtime(e.to_string()),
            S::Core(c) => c.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}
