use thiserror::Error;

/// Error type shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A singular kernel was evaluated at the origin.
    #[error("kernel is singular at the origin")]
    Singularity,

    /// A point was handed to an operation that requires it to lie inside the
    /// domain.
    #[error("point {0:?} lies outside the domain")]
    OutsideDomain(Vec<f64>),

    /// Malformed input that the caller can fix (bad tolerance, empty probe
    /// list, non-geometric delta sequence, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The kernel carries no mass where the computation needs it.
    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    /// The request is outside what this crate implements (dimension > 3,
    /// non-integrable kernel where an L^1 bound is required, ...).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A linear system required by the operation is rank deficient.
    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    /// The grid is too coarse for the requested scale (e.g. a mollification
    /// radius below two cells).
    #[error("resolution too coarse: {0}")]
    Resolution(String),

    /// A computation ran but produced numerically meaningless output
    /// (vanishing quadratic form, non-finite values, ...).
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    /// Measured data violates a hypothesis the experiment assumes
    /// (e.g. seminorms growing without bound along a sequence).
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
