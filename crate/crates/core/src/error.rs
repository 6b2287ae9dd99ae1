use thiserror::Error;

/// Errors raised by the scattering, sensitivity and eigenvalue routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid mismatch: expected {expected} entries, got {actual}")]
    GridMismatch { expected: usize, actual: usize },

    #[error("trace vector has {actual} coefficients, truncation requires {expected}")]
    TruncationMismatch { expected: usize, actual: usize },

    #[error("trace vectors live on different boundaries")]
    SideMismatch,

    #[error("inclusions {0} and {1} overlap")]
    OverlappingInclusions(i64, i64),

    #[error("inclusion {0} is not contained in the period cell")]
    InclusionOutsideCell(i64),

    #[error("inclusion {0} covers no mesh cells")]
    EmptyInclusion(i64),

    #[error("inclusion {0} boundary is too close to the cell edge for interface sampling")]
    BoundaryTooClose(i64),

    #[error("harmonic order {m} is not propagating")]
    NotPropagating { m: i64 },

    #[error("truncation m_max = {m_max} aliases on a boundary with {nx} nodes (need m_max < nx/2)")]
    Aliasing { m_max: usize, nx: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("linear solve residual {residual:e} exceeds tolerance {tolerance:e}")]
    Residual { residual: f64, tolerance: f64 },

    #[error("eigensolver did not converge: {0}")]
    EigenNonConvergence(String),

    #[error("lambda_j(omega) - omega^2 does not change sign on [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },

    #[error("coefficient field leaves the admissible envelope at {count} cells")]
    Inadmissible { count: usize },

    #[error(
        "non-resonance certificate failed: certified interval ({lower}, {upper}) misses [{range_lo}, {range_hi}]"
    )]
    NotCertified {
        lower: f64,
        upper: f64,
        range_lo: f64,
        range_hi: f64,
    },

    #[error("optimization aborted at iteration {iter}: {reason}")]
    Aborted {
        iter: usize,
        reason: String,
        field: Box<crate::structure::CoefficientField>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
