use alloc::string::String;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("out of domain")]
    OutOfDomain,
    #[error("outside level window: {0}")]
    OutsideWindow(String),
    #[error("cube does not belong to grid {expected:#x} (found {found:#x})")]
    GridMismatch { expected: u64, found: u64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("scale parameter t must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("negative input value {0}")]
    NegativeInput(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("kernel is not a tensor of one-parameter kernels")]
    NotTensor,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("weights are not decreasing at k = {0}")]
    NotDecreasing(usize),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
