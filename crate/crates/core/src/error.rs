use thiserror::Error;

/// Errors raised across the sampling, guidance and estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} outside [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite {what} at t = {t} (x = {x:?})")]
    NonFinite { what: &'static str, t: f64, x: Vec<f64> },

    #[error("trajectory aborted at step {step} (t = {t}): {reason}")]
    Trajectory { step: usize, t: f64, reason: String },

    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("{0} is not positive-definite")]
    NotPositiveDefinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("rejection sampler acceptance rate {rate:.3e} below 1e-4 after {proposals} proposals")]
    LowAcceptance { rate: f64, proposals: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn non_finite(what: &'static str, t: f64, x: &crate::Vector) -> Self {
        Error::NonFinite {
            what,
            t,
            x: x.iter().copied().collect(),
        }
    }

    /// True for numeric failures (as opposed to usage or configuration errors).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Trajectory { .. }
                | Error::LowAcceptance { .. }
                | Error::TrainingDiverged { .. }
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape { expected, got });
    }
    Ok(())
}
