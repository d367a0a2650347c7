//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("form arity {k} exceeds sample size {n}")]
    ArityExceedsSample { k: usize, n: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("element kinds do not match ({left} vs {right})")]
    KindMismatch { left: &'static str, right: &'static str },

    #[error("enumeration of {required:.3e} tuples exceeds the cap {cap:.3e}")]
    EnumerationCapExceeded { required: f64, cap: f64 },

    #[error("empty sample")]
    EmptySample,

    #[error("pilot outside the functional's domain: {0}")]
    PilotOutsideDomain(String),

    #[error("requested order {s} exceeds the family's max order {max_order}")]
    OrderExceedsFamily { s: usize, max_order: usize },

    #[error("cross-fit parts must have equal sizes (got {left} and {right})")]
    UnequalSplit { left: usize, right: usize },

    #[error("product structure does not cover order {k} (max {max_order})")]
    OrderNotCovered { k: usize, max_order: usize },

    #[error("matrix is singular or not positive definite")]
    SingularInput,

    #[error("matrix has non-positive determinant")]
    NonPositiveDeterminant,

    #[error("shifted matrix A - zI is singular or ill-conditioned")]
    SingularShift,

    #[error("finite-difference step too large for the domain margin")]
    DomainTooTight,

    #[error("matrix is not symmetric")]
    NonSymmetric,

    #[error("more blocks ({blocks}) than observations ({n})")]
    TooManyBlocks { blocks: usize, n: usize },

    #[error("dimension {got} too small; the model requires at least {min}")]
    DimensionTooSmall { min: usize, got: usize },

    #[error("need at least {required} observations, got {n}")]
    InsufficientData { required: usize, n: usize },

    #[error("multiplier resamples kept leaving the domain after {attempts} attempts")]
    DegenerateResample { attempts: usize },

    #[error("normality study needs at least one replication")]
    EmptyStudy,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
