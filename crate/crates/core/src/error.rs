use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met by its arguments.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An iterate or parameter became NaN or infinite.
    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    /// A matrix that must be inverted was not positive definite.
    #[error("singular {what} at step {step}")]
    Singular { step: usize, what: &'static str },

    /// Smoothing failed inside the IAKE loop.
    #[error("IAKE iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    /// A nonlinear stage produced a non-finite jacobian or value.
    #[error("linearization failed at stage {stage} (outer iteration {outer}): {what}")]
    Linearization {
        stage: usize,
        outer: usize,
        what: String,
    },

    /// A reference computation could not produce an answer.
    #[error("oracle failure: {0}")]
    Oracle(String),

    /// Invalid scenario geometry (coordinate singularity, infeasible pinning).
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
