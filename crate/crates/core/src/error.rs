use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpcError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not Hermitian (relative asymmetry {0:.3e})")]
    NotHermitian(f64),
    #[error("eigensolver did not converge")]
    NoConvergence,
    #[error("matrix is not positive semidefinite (eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("operator norm {0} exceeds one")]
    NormExceedsOne(f64),
    #[error("avoidance leaves the zero space ({constraints} constraints on a {dim}-dimensional space)")]
    Exhausted { dim: usize, constraints: usize },
    #[error("value {0} is not in the numerical range")]
    NotInRange(num_complex::Complex64),
    #[error("value {0} is not in the numerical range of the compression")]
    NotInCompressedRange(num_complex::Complex64),
    #[error("no support pair brackets {0} after all retries")]
    Degenerate2x2Fallback(num_complex::Complex64),
    #[error("point {0} is not inside the region")]
    NotInside(num_complex::Complex64),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("region is not covered by the anchor hull: {0}")]
    RegionNotCovered(String),
    #[error("room exhausted at anchor {anchor} (capacity {capacity}); {context}")]
    RoomExhausted {
        anchor: usize,
        capacity: usize,
        context: String,
    },
    #[error("region violated at t = {0}")]
    RegionViolatedAtT(f64),
    #[error("convex weights invalid: {0}")]
    WeightsNotConvex(String),
    #[error("unitary equivalence violated (residual {0:.3e})")]
    EquivalenceViolated(f64),
    #[error("margin violated: {0}")]
    MarginViolated(String),
    #[error("refinement needs eps < theta (a = {0})")]
    ThetaTooSmall(f64),
    #[error("epsilon {eps} is not below theta {theta}")]
    EpsilonNotLessThanTheta { eps: f64, theta: f64 },
    #[error("path is not a strict contraction (max norm {0})")]
    NormNotStrictContraction(f64),
    #[error("truncation tail {tail:.3e} exceeds tolerance {tol:.3e}; use at least {suggested} positions")]
    TailTooLarge {
        tail: f64,
        tol: f64,
        suggested: usize,
    },
    #[error("too many families: {families} requested with multiplicity {multiplicity}")]
    TooManyFamilies { families: usize, multiplicity: usize },
    #[error("spectrum of the target leaves [{a}, {b}] at t = {t}")]
    SpectrumOutsideInterval { a: f64, b: f64, t: f64 },
    #[error("cover gap at {0}")]
    CoverageGap(num_complex::Complex64),
    #[error("operator is not self-adjoint at t = {0}")]
    NotSelfAdjoint(f64),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl OpcError {
    pub fn is_room_exhausted(&self) -> bool {
        matches!(self, OpcError::RoomExhausted { .. })
    }
}

pub type Result<T> = std::result::Result<T, OpcError>;
