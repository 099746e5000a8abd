use thiserror::Error;

use crate::trace::Violation;

pub type Result<T> = std::result::Result<T, VskipError>;

#[derive(Debug, Error)]
pub enum VskipError {
    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: invalid trace: {}", join_violations(.violations))]
    Validation { line: usize, violations: Vec<Violation> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("training error in {matrix}: {message}")]
    Training { matrix: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VskipError {
    pub fn domain(msg: impl Into<String>) -> Self {
        VskipError::Domain(msg.into())
    }

    /// True for malformed input data (parse or invariant failures), as
    /// opposed to failures of the processing itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            VskipError::Parse { .. } | VskipError::Validation { .. } | VskipError::Domain(_)
        )
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
