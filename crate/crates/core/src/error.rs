use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("negative squared distance {0:e}")]
    NegativeDistance(f64),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("degenerate position: estimated coordinates sit at the array center")]
    DegeneratePosition,

    #[error("combiner is rank deficient (smallest singular value {0:e})")]
    RankDeficient(f64),

    #[error("empty input")]
    Empty,

    #[error("reference channel has zero norm")]
    ZeroNorm,

    #[error("non-finite loss at step {step} (batch seed {batch_seed:#018x})")]
    NonFiniteLoss { step: usize, batch_seed: u64 },

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
