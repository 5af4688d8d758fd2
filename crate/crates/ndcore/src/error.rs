use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NdError {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

impl NdError {
    pub(crate) fn shape(
        op: &'static str,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        NdError::ShapeMismatch {
            op,
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        NdError::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = NdError> = std::result::Result<T, E>;
