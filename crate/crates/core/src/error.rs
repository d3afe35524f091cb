use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("svd of a {rows}x{cols} matrix did not converge (max |a_ij| = {max_abs:.3e}, frobenius = {frobenius:.3e})")]
    SvdNoConvergence {
        rows: usize,
        cols: usize,
        max_abs: f64,
        frobenius: f64,
    },

    #[error("symmetric eigendecomposition of a {dim}x{dim} matrix did not converge")]
    EigenNoConvergence { dim: usize },

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("vector lies outside the dual-norm unit ball (dual norm {norm:.9}, tolerance {tol:e})")]
    DualDomain { norm: f64, tol: f64 },

    #[error("stratum mismatch: {0}")]
    StratumMismatch(String),

    #[error("invalid stratum: {0}")]
    InvalidStratum(String),

    #[error("complexity {s} out of range (bound {bound})")]
    ComplexityOutOfRange { s: usize, bound: usize },

    #[error("dual certificate problem infeasible: distance between the subdifferential and the range of C stays at {residual:.3e} (is w0 the unique solution of the population problem?)")]
    CertificateInfeasible { residual: f64 },

    #[error("certificate solver did not converge after {iterations} iterations (primal residual {primal:.3e}, dual residual {dual:.3e})")]
    CertificateNotConverged {
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("non-finite iterate at step {step}")]
    Diverged { step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, found })
        }
    }
}
