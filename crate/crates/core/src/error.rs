use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Input and consistency failures shared by every module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("invalid {field}: {reason}")]
    InvalidInput { field: String, reason: String },

    #[error("unknown operator `{0}`")]
    UnknownOperator(String),

    /// Value iteration produced a non-finite vector.
    #[error("value iteration overflowed at stage {stage}")]
    Numeric { stage: usize },

    #[error("capability exceeded: {0}")]
    Capability(String),

    /// Two successful solves at the same perturbation disagreed on the
    /// ergodic constant by more than the allowed slack.
    #[error("inconsistent ergodic constants {first} and {other} (allowed gap {allowed})")]
    InconsistentLambda { first: f64, other: f64, allowed: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got: x.len(),
        });
    }
    check_finite(what, x)
}

pub(crate) fn check_finite(what: &'static str, x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}
