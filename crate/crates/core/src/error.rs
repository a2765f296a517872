use thiserror::Error;

/// Errors raised by the Kepler-Heisenberg library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A potential evaluation came too close to the singularity at the origin.
    #[error("collision singularity: mu = {mu:e} is below the threshold {threshold:e}")]
    Collision { mu: f64, threshold: f64 },

    /// An argument violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// The adaptive integrator could not make progress.
    #[error("step size underflow at t = {t}: h = {h:e}")]
    StepSizeUnderflow { t: f64, h: f64 },

    /// The adaptive integrator exceeded its step budget.
    #[error("step budget of {max_steps} exhausted at t = {t}")]
    TooManySteps { t: f64, max_steps: usize },

    /// A file or string could not be parsed into a domain object.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
