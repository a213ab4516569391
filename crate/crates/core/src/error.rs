use thiserror::Error;

/// Errors raised by the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("out of domain: {0}")]
    Domain(String),
    #[error("invalid config: {0}")]
    Config(String),
    /// A run stopped on a non-finite loss or gradient; `partial` holds the
    /// log up to the last good evaluation.
    #[error("run aborted at step {step}: {what}")]
    Aborted {
        step: usize,
        what: String,
        partial: Box<crate::experiments::RunLog>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
