//! Error type shared by all modules.

/// Errors raised by factored-matrix construction and the numerical kernels.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("columns are not orthonormal: defect {defect:.3e} exceeds tolerance {tol:.3e}")]
    NotOrthonormal { defect: f64, tol: f64 },
    #[error("matrix is not symmetric positive definite")]
    NotPd,
    #[error("diagonal entry {index} is not strictly positive")]
    NonPositiveDiagonal { index: usize },
    #[error("refusing to materialize a {d}x{d} dense matrix (limit {limit})")]
    TooLargeToDensify { d: usize, limit: usize },
    #[error("total factor width {width} exceeds limit {limit}")]
    WidthExceeded { width: usize, limit: usize },
    #[error("inner {size}x{size} system is singular")]
    SingularSmallSystem { size: usize },
    #[error("a rank-deficient (low-rank) matrix cannot be inverted")]
    NotInvertible,
    #[error("tangent delta variant does not match the base point variant")]
    MismatchedVariant,
    #[error("QR retraction encountered a rank-deficient step")]
    RankDeficient,
    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error("empty sample set")]
    EmptySampleSet,
}

pub type Result<T> = std::result::Result<T, Error>;
