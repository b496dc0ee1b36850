use thiserror::Error;

/// Errors raised by model construction, the solvers and the batch driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("assumption violated ({assumption}): {detail}")]
    AssumptionViolated {
        assumption: &'static str,
        detail: String,
    },

    #[error("singular branch requested but the model has no tail")]
    TailMissing,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("ambiguous cluster boundary after eigenvalue {index}: gap {gap:.3e} lies in ({gap_tol:.3e}, {:.3e})", 2.0 * gap_tol)]
    AmbiguousCluster { index: usize, gap: f64, gap_tol: f64 },

    #[error("shift {shift} is too close to the spectrum (distance {distance:.3e})")]
    SingularShift { shift: String, distance: f64 },

    #[error("first-order splitting of cluster {cluster} is not simple (min splitting {splitting:.3e})")]
    DegenerateFirstOrder { cluster: usize, splitting: f64 },

    #[error("eigenvalue tracking lost at eta = {eta}: best overlap {overlap:.4}")]
    TrackingLost { eta: f64, overlap: f64 },

    #[error("spectral gap {gap:.3e} too small to build the reduced resolvent")]
    GapTooSmall { gap: f64 },

    #[error("almost-projection defect {defect:.3e} is not below 1/8")]
    DefectTooLarge { defect: f64 },

    #[error("projections too far apart: |P - Q| = {distance:.3e} >= 1")]
    ProjectionsTooFar { distance: f64 },

    #[error("rank mismatch: expected {expected}, found {found}")]
    RankMismatch { expected: usize, found: usize },

    #[error("amplitude support [{lo}, {hi}] exceeds the momentum grid [{grid_lo}, {grid_hi}]")]
    SupportExceedsGrid {
        lo: f64,
        hi: f64,
        grid_lo: f64,
        grid_hi: f64,
    },

    #[error("expansion incomplete: tail norm {tail_norm:.3e} exceeds delta {delta:.3e}")]
    ExpansionIncomplete { tail_norm: f64, delta: f64 },

    #[error("parse error at line {line}, key `{key}`: {message}")]
    Parse {
        line: usize,
        key: String,
        message: String,
    },

    #[error("LAPACK routine {routine} failed with info = {info}")]
    Lapack { routine: &'static str, info: i32 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn assumption(assumption: &'static str, detail: impl Into<String>) -> Self {
        Error::AssumptionViolated {
            assumption,
            detail: detail.into(),
        }
    }
}
