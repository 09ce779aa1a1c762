use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("flow solve failed at lambda = {lambda}: inner matrix is not positive definite")]
    FlowSolve { lambda: f64 },

    #[error("non-finite particle {particle} at flow step {step}")]
    FlowDiverged { step: usize, particle: usize },

    #[error("singular innovation covariance in kalman update")]
    SingularInnovation,

    #[error("weights are not normalized (sum = {sum})")]
    UnnormalizedWeights { sum: f64 },

    #[error("all particle weights underflowed at time index {time}")]
    WeightUnderflow { time: usize },

    #[error("non-finite likelihood at horizon {horizon}, particle {particle}")]
    NonFiniteLikelihood { horizon: usize, particle: usize },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at row {row}, column {column}: {reason}")]
    Parse {
        row: usize,
        column: usize,
        reason: String,
    },

    #[error("series `{series}` starts with a missing value")]
    LeadingMissing { series: String },

    #[error("segment of length {len} is shorter than the window length {needed}")]
    SegmentTooShort { len: usize, needed: usize },

    #[error("standard deviation of training data is zero")]
    ZeroStd,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by front-ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Shape { .. } | Error::InvalidParameter { .. } | Error::Checkpoint(_) => {
                ErrorClass::Usage
            }
            Error::NonFinite { .. }
            | Error::FlowSolve { .. }
            | Error::FlowDiverged { .. }
            | Error::SingularInnovation
            | Error::UnnormalizedWeights { .. }
            | Error::WeightUnderflow { .. }
            | Error::NonFiniteLikelihood { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Diverged { .. }
            | Error::ZeroStd => ErrorClass::Numeric,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::LeadingMissing { .. }
            | Error::SegmentTooShort { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorClass::Data,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
