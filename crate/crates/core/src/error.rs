use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("an empirical ensemble needs at least one agent")]
    EmptyEnsemble,

    #[error("invalid agent state: {0}")]
    InvalidState(String),

    #[error("density vanishes on every cell centre of the grid")]
    ZeroMass,

    #[error("transition rate {name} evaluated to {value} (< 0)")]
    NegativeRate { name: &'static str, value: f64 },

    #[error("follower mass {0:e} is too small to define the follower barycentre")]
    DegenerateFollowerMass(f64),

    #[error("label coordinates left the simplex by {0:e}; the time step is too large")]
    SimplexOvershoot(f64),

    #[error("state became non-finite")]
    NonFiniteState,

    #[error("time step {dt} exceeds the upwind stability limit {limit}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("cell {index} became negative ({value:e})")]
    NegativeCell { index: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid discrete measure: {0}")]
    InvalidMeasure(String),

    #[error("support of size {size} exceeds the exact-solver cap {cap}")]
    SupportTooLarge { size: usize, cap: usize },

    #[error("control optimisation stopped after {iterations} iterations with projected step {grad_norm:e}")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("concentration normalisers have not been calibrated")]
    NormalizersUnset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
