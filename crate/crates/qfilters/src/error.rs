use crate::format::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] qfilters_core::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("budget exceeded at step {step}: a head holds {len} entries, budget is {budget}")]
    BudgetExceeded { step: usize, len: usize, budget: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
