use std::fmt;

use lotto_core::Error as CoreError;

/// Command failure, split by exit code: bad inputs (1) versus failures while
/// running a valid experiment (2).
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }

    /// Single-line form for standard error:
    /// `lotto-error kind=<kind> code=<n> message=<json string>`.
    pub fn line(&self) -> String {
        format!(
            "lotto-error kind={} code={} message={}",
            self.kind(),
            self.exit_code(),
            serde_json::Value::String(self.message().to_string())
        )
    }

    /// Prefix the message with where the failure happened.
    pub fn context(self, what: impl fmt::Display) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{what}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InvalidDepth { .. }
            | CoreError::InvalidSpec(_)
            | CoreError::TruncatedCifar { .. }
            | CoreError::BadCifarLabel { .. }
            | CoreError::UnknownCorruption(_)
            | CoreError::DensityTooLarge { .. }
            | CoreError::NotRemovable(_)
            | CoreError::InfeasibleFilterTarget { .. }
            | CoreError::MissingCheckpoint { .. }
            | CoreError::LabelSpace(_)
            | CoreError::InvalidArgument(_) => CliError::Validation(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
