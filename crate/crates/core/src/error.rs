use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("simulation blew up at substep {substep}: non-finite state")]
    SimulationBlowup { substep: usize },

    #[error("trajectory {trajectory}: {source}")]
    Trajectory {
        trajectory: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown environment `{0}` (expected one of ou1d, doublewell1d, ou2d)")]
    UnknownEnvironment(String),

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("invalid behavior policy: {0}")]
    InvalidPolicy(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("insufficient data: {folds} folds need at least {folds} trajectories, got {trajectories}")]
    InsufficientData { folds: usize, trajectories: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("metric is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    #[error("Gram matrix is singular even after jitter")]
    SingularGram,

    #[error("oracle unsupported: {0}")]
    UnsupportedOracle(String),

    #[error("value iteration did not converge: residual {residual:e} after {iterations} sweeps")]
    NotConverged { residual: f64, iterations: usize },

    #[error("invalid feature spec `{0}`")]
    FeatureSpec(String),

    #[error("{field}: {message}")]
    Config { field: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed record at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::SimulationBlowup { .. }
            | Error::NotPositiveSemidefinite(_)
            | Error::Conditioning(_)
            | Error::SingularGram
            | Error::NotConverged { .. } => true,
            Error::Trajectory { source, .. } | Error::Iteration { source, .. } => {
                source.is_numeric()
            }
            _ => false,
        }
    }

    pub(crate) fn in_trajectory(self, trajectory: usize) -> Self {
        Error::Trajectory {
            trajectory,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
