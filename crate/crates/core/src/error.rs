use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("configuration error: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("unsupported stage {stage}: {reason}")]
    UnsupportedStage { stage: usize, reason: String },
    #[error("training diverged at step {step} on samples {batch:?}: {cause}")]
    Diverged { step: u64, batch: Vec<usize>, cause: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}
