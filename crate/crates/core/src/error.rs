use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("marked Y-layer has {found} sites, expected {expected} ({which})")]
    YLayerMismatch {
        which: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("edge ({0}, {1}) has asymmetric weights")]
    NonSymmetricWeights(usize, usize),

    #[error("edge ({0}, {1}) has negative weight {2}")]
    NegativeWeight(usize, usize, f64),

    #[error("box length along u{0} is zero")]
    ZeroBoxLength(usize),

    #[error("site index {index} out of range (dimension {dim})")]
    OutOfRange { index: usize, dim: usize },

    #[error("channel index must be 1, 2 or 3, got {0}")]
    InvalidChannel(u8),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("quadrature needs at least 4 nodes per variable, got {0}")]
    QuadratureTooSmall(usize),

    #[error("scaled observables need t >= 1, got {0}")]
    TimeBelowOne(f64),

    #[error("no convergence: {0}")]
    NonConvergence(String),

    #[error("propagator needs degree {needed} but budget is {budget}")]
    DegreeBudget { needed: usize, budget: usize },

    #[error("spectral window holds {found} eigenvalues, budget {budget}")]
    ProjectionBudget { found: usize, budget: usize },

    #[error("spectral projector has rank 0")]
    EmptyProjector,

    #[error("dimension {dim} exceeds dense budget {budget}")]
    DimensionBudget { dim: usize, budget: usize },

    #[error("channel {channel} has no bound state with index {index}")]
    MissingBoundState { channel: u8, index: usize },

    #[error("insufficient decay range: {0}")]
    InsufficientDecay(String),

    #[error("state rejected: {0}")]
    Rejected(String),

    #[error("ill-conditioned system (condition number {0:e})")]
    IllConditioned(f64),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of numerical procedures (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence(_)
                | Error::DegreeBudget { .. }
                | Error::ProjectionBudget { .. }
                | Error::EmptyProjector
                | Error::InsufficientDecay(_)
                | Error::IllConditioned(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
