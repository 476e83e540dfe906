//! Errors surfaced by the CLI and the HTTP API.

use std::fmt;

use lago_core::trial_model::ValidationReport;
use lago_core::LagoError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    /// Malformed request or arguments.
    Usage,
    /// Configuration failed validation.
    Validation,
    /// Input data could not be read or is out of domain.
    Data,
    NotFound,
    /// The operation's preconditions are not met yet.
    Conflict,
    /// The model or optimizer could not produce a result.
    Computation,
}

#[derive(Debug, Clone)]
pub struct AppError {
    pub class: ErrorClass,
    /// Machine-readable tag, e.g. `rank_deficient`.
    pub kind: String,
    pub message: String,
    pub report: Option<ValidationReport>,
}

pub type AppResult<T> = std::result::Result<T, AppError>;

impl AppError {
    pub fn new(class: ErrorClass, kind: &str, message: impl Into<String>) -> Self {
        Self {
            class,
            kind: kind.into(),
            message: message.into(),
            report: None,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Usage, "usage", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::NotFound, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Conflict, "precondition", message)
    }

    pub fn io(path: &str, err: std::io::Error) -> Self {
        Self::new(
            ErrorClass::Data,
            "io",
            format!("cannot read `{path}`: {err}"),
        )
    }

    /// `{"error":{"kind":..,"message":..}}` on one line.
    pub fn json_line(&self) -> String {
        serde_json::json!({"error": {"kind": self.kind, "message": self.message}}).to_string()
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for AppError {}

impl From<LagoError> for AppError {
    fn from(e: LagoError) -> Self {
        let class = match &e {
            LagoError::InvalidConfig(_) => ErrorClass::Validation,
            LagoError::Precondition(_) | LagoError::NoNextStage { .. } => ErrorClass::Conflict,
            LagoError::RankDeficient { .. }
            | LagoError::NoOutcomeVariation(_)
            | LagoError::NonConvergence { .. }
            | LagoError::Separation { .. }
            | LagoError::EmptyGrid => ErrorClass::Computation,
            _ => ErrorClass::Data,
        };
        let report = match &e {
            LagoError::InvalidConfig(r) => Some(r.clone()),
            _ => None,
        };
        Self {
            class,
            kind: e.kind().into(),
            message: e.to_string(),
            report,
        }
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(ErrorClass::Usage, "json", e.to_string())
    }
}
