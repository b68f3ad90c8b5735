use serde_json::{json, Value};
use thiserror::Error;

/// Failures surfaced by the runner, each mapped to a process exit code.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("bad parameter path `{0}`")]
    BadParamPath(String),
    #[error(transparent)]
    Numeric(#[from] gvu_core::Error),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// 2 for configuration problems, 3 for numerical failures, 4 for io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } | Self::Validation { .. } | Self::BadParamPath(_) => 2,
            Self::Numeric(_) => 3,
            Self::Io(_) => 4,
        }
    }

    /// Field name for validation errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            Self::Validation { field, .. } => Some(field),
            Self::BadParamPath(path) => Some(path),
            _ => None,
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self) -> Value {
        let kind = match self {
            Self::Parse { .. } => "ParseError",
            Self::Validation { .. } => "ValidationError",
            Self::BadParamPath(_) => "BadParamPath",
            Self::Numeric(_) => "NumericError",
            Self::Io(_) => "IoError",
        };
        let mut v = json!({
            "error": kind,
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let Some(field) = self.field() {
            v["field"] = json!(field);
        }
        if let Self::Parse { line, column, .. } = self {
            v["line"] = json!(line);
            v["column"] = json!(column);
        }
        v
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
