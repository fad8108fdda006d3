//! Error type shared across the crate.

/// Errors produced by kernels, manifold operations, the preconditioner,
/// the trust-region solver, and the integrators.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension mismatch between operands.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A shifted banded factorization hit a pivot below its threshold.
    #[error(
        "shifted system is numerically singular: pivot {pivot:.3e} below threshold {threshold:.3e}"
    )]
    SingularShift { pivot: f64, threshold: f64 },

    /// The coupled preconditioner core system is too ill-conditioned to trust.
    #[error("preconditioner core system is ill-conditioned (condition estimate {cond:.3e})")]
    IllConditioned { cond: f64 },

    /// A retraction or truncation would leave the fixed-rank manifold.
    #[error("rank-deficient result: smallest/largest singular value ratio {ratio:.3e}")]
    RankDeficient { ratio: f64 },

    /// Tangent vectors anchored at different points were combined.
    #[error("tangent vectors belong to different base points")]
    AnchorMismatch,

    /// A factored intermediate exceeded the allowed inner dimension.
    #[error("factored inner dimension {needed} exceeds budget {budget}")]
    RankBudget { needed: usize, budget: usize },

    /// A non-finite value (NaN or infinity) appeared where it must not.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// A linear solve or factorization failed.
    #[error("solver failure: {0}")]
    Solver(String),
}

pub type Result<T> = std::result::Result<T, Error>;
