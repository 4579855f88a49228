use thiserror::Error;

/// Errors raised by schedules, operators, potentials and samplers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("decoder timestep list is empty (use an identity decoder instead)")]
    EmptyTimesteps,

    #[error("non-finite decoder state after visiting timestep {timestep}")]
    NonFiniteState { timestep: usize },

    #[error("magnitude is not differentiable at zero-modulus Fourier bin {bin}")]
    NondifferentiablePoint { bin: usize },

    #[error("residual norm is zero; the marginalized likelihood diverges")]
    DegenerateFit,

    #[error("non-finite leapfrog trajectory at step {step}")]
    Divergence { step: usize },

    #[error("iteration {iteration}: no proposal accepted after {retries} retries (final step size {step_size:e})")]
    RetriesExhausted {
        iteration: usize,
        retries: usize,
        step_size: f64,
        /// Energy error `H1 - H0` of every rejected proposal, in order.
        delta_h: Vec<f64>,
    },

    #[error("operator `{0}` is nonlinear")]
    NonlinearOperator(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
