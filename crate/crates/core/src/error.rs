use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput((usize, usize)),

    #[error("matrix is not positive definite (after jitter up to {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("singular linear system in `{0}`")]
    Singular(&'static str),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("non-finite state at step {step} (t = {t})")]
    NonFiniteState { step: usize, t: f64 },

    #[error("step size {h:e} fell below minimum at t = {t} (stiff problem)")]
    StepTooSmall { t: f64, h: f64 },

    #[error("step budget of {max_steps} exhausted at t = {t} (stiff problem)")]
    StepBudget { t: f64, max_steps: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures of the adaptive solvers that signal stiffness.
    pub fn is_stiff(&self) -> bool {
        matches!(self, Error::StepTooSmall { .. } | Error::StepBudget { .. })
    }
}
