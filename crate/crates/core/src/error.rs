use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid Givens index pair ({i}, {j}) for dimension {dim}")]
    InvalidIndex { dim: usize, i: usize, j: usize },

    #[error("invalid angle vector: {0}")]
    InvalidAngles(String),

    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),

    #[error("sample covariance is singular: eigenvalue {eigenvalue:e} vs largest {largest:e}")]
    SingularCovariance { eigenvalue: f64, largest: f64 },

    #[error("insufficient sample: need at least {min} observations, got {n}")]
    InsufficientSample { n: usize, min: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("median pairwise distance of component {component} is zero; bandwidth undefined")]
    DegenerateBandwidth { component: usize },

    #[error("bandwidth must be strictly positive, got {0}")]
    InvalidBandwidth(f64),

    #[error("objective is not finite at theta = {theta:?}")]
    NonFiniteObjective { theta: Vec<f64> },

    #[error("Gaussian process covariance is not positive definite: {0}")]
    IllConditionedGp(String),

    #[error("non-finite entry at ({row}, {col})")]
    NonFiniteEntry { row: usize, col: usize },

    #[error("matrix is singular: {0}")]
    SingularMatrix(String),

    #[error("row {0} of the gain matrix is zero")]
    ZeroRow(usize),

    #[error("column {0} has zero variance")]
    ZeroVariance(usize),

    #[error("unknown source distribution {0:?}")]
    UnknownSource(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("objective is non-finite at every candidate")]
    NoFiniteCandidate,
}

pub type Result<T> = std::result::Result<T, Error>;
