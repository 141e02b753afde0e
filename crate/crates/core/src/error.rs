use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("space mismatch: expected {expected} points, found {found}")]
    SpaceMismatch { expected: usize, found: usize },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("point index {index} outside space of size {size}")]
    PointOutOfRange { index: usize, size: usize },

    #[error("invalid space: {0}")]
    InvalidSpace(String),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("not normalized: total mass {mass} (tolerance {tol})")]
    NotNormalized { mass: f64, tol: f64 },

    #[error("tuple of length {len} exceeds truncation order {n_max}")]
    TupleTooLong { len: usize, n_max: usize },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("tensor storage of {entries} entries exceeds the limit of {limit}")]
    TooLarge { entries: usize, limit: usize },

    #[error("poisson tail {tail} still above tolerance {tol} at the hard cap n_max = {cap}")]
    TailUnreachable { tail: f64, tol: f64, cap: usize },

    #[error("non-finite functional evaluation")]
    NonFinite,

    #[error("measurement set has zero likelihood under the model")]
    ZeroEvidence,

    #[error("truncated mass {mass} exceeds tolerance {tol}")]
    TruncationOverflow { mass: f64, tol: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),
}
