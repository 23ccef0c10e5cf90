use ore_core::OreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] OreError),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Usage(_) => "E_USAGE",
        }
    }

    /// Message without the error-kind prefix already carried by the code.
    pub fn message(&self) -> String {
        match self {
            CliError::Core(OreError::Validation(m)) => m.clone(),
            CliError::Core(OreError::Lookup(m)) => m.clone(),
            CliError::Core(OreError::Refused(m)) => m.clone(),
            other => other.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.code() {
            "E_USAGE" | "E_VALIDATION" => 2,
            "E_IO" => 3,
            "E_PARSE" => 4,
            "E_LOOKUP" => 5,
            "E_BUDGET" => 6,
            "E_REFUSED" => 7,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
