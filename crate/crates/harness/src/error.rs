use std::path::Path;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("missing input {path}: {reason}")]
    MissingInput { path: String, reason: String },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("constraint violation: {0}")]
    Constraint(String),
    #[error(transparent)]
    Core(csiguard_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl From<csiguard_core::Error> for HarnessError {
    fn from(e: csiguard_core::Error) -> Self {
        match e {
            csiguard_core::Error::ConstraintViolation(m) => Self::Constraint(m),
            other => Self::Core(other),
        }
    }
}

impl HarnessError {
    pub fn missing(path: &Path, reason: impl std::fmt::Display) -> Self {
        Self::MissingInput {
            path: path.display().to_string(),
            reason: reason.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::MissingInput { .. } => "missing_input",
            Self::Schema(_) => "schema",
            Self::Constraint(_) => "constraint",
            Self::Core(_) => "core",
            Self::Io(_) => "io",
            Self::Csv(_) => "csv",
            Self::Json(_) => "json",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingInput { .. } => 3,
            Self::Schema(_) => 4,
            Self::Constraint(_) => 5,
            _ => 1,
        }
    }

    /// Single-line machine-readable form for stderr.
    pub fn to_json(&self) -> String {
        json!({
            "error": {
                "kind": self.kind(),
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        })
        .to_string()
    }
}
