use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid weight: {0}")]
    InvalidWeight(String),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("point lies on the singular locus of the weight")]
    SingularPoint,
    #[error("moment is not integrable: exponent {exponent} <= -1")]
    NonIntegrable { exponent: f64 },
    #[error("quadrature did not reach tolerance: rel_err {rel_err:e} > {tol:e}")]
    PrecisionNotReached { rel_err: f64, tol: f64 },
    #[error("norm table cutoff exceeded {limit} on axis {axis}")]
    CutoffExplosion { axis: usize, limit: usize },
    #[error("kernel tail could not be certified at the requested point")]
    TailNotCertified,
    #[error("Galerkin matrix of size {0} exceeds the configured limit")]
    MatrixTooLarge(usize),
    #[error("Galerkin quadrature in dimension {0} is too expensive (force it explicitly)")]
    QuadratureTooExpensive(usize),
    #[error("the function is identically zero")]
    ZeroFunction,
    #[error("function is not eps^2-concentrated: ratio {ratio} < {required}")]
    NotConcentratedEnough { ratio: f64, required: f64 },
    #[error("decomposition residual failed to contract (ratio {0})")]
    ContractionFailure(f64),
    #[error("monomial {0:?} dominates no element of the concentrated index set")]
    StaircaseGap(Vec<u32>),
    #[error("concentrated sum vanishes at a grid point")]
    DivisionByZero,
    #[error("coefficient {0} is not a small-denominator rational")]
    IrrationalCoefficient(f64),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
