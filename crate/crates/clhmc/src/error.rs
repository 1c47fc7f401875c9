use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("mixture component {index} became degenerate (zero effective weight)")]
    DegenerateComponent { index: usize },

    #[error("density fit failed: {0}")]
    FitFailure(String),

    #[error("Hamiltonian trajectory diverged (non-finite energy or gradient)")]
    TrajectoryDivergence,

    #[error("elliptic solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    SolverFailure { residual: f64, iterations: usize },

    #[error("model state became non-finite during time integration")]
    ModelBlowUp,

    #[error("model propagation failed for member {member}: {source}")]
    MemberFailure {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
