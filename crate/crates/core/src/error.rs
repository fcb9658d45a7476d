use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric, model, cache and calibration layers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Power iteration ran out of iterations. `iterate` is the last unit vector reached.
    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        iterate: Vec<f64>,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("insufficient data: {what} requires {required}, only {available} available")]
    InsufficientData {
        what: String,
        required: usize,
        available: usize,
    },

    #[error("filters do not match model: {0}")]
    FilterModelMismatch(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
