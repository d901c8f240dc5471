use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("state vector contains non-finite entries")]
    NonFiniteState,

    /// Every particle ended up with zero (or NaN) weight.
    #[error("weight collapse: no particle carries finite weight")]
    WeightCollapse,

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for failures of the numerical kind (collapse, broken covariances),
    /// as opposed to malformed inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::WeightCollapse | Error::Numerical(_) | Error::NonFiniteState)
    }
}
