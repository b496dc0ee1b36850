//! Rayleigh–Schrödinger coefficients, the tracking oracle, and the almost
//! invariant subspace machinery for singular perturbations.

pub mod coupling;
pub mod resolvent;
pub mod series;
pub mod tracking;

pub use coupling::{coupling_matrix, rs_coefficients, CouplingTensor, RsCoefficients};
pub use resolvent::ReducedResolvent;
pub use series::{
    almost_invariance_sweep, almost_projection_p, commutator_defect, effective_eigenpair, eigenvalue_agreement,
    loglog_slope, series_term_q, series_terms, sz_nagy_intertwiner, truncated_series_t, DefectRow, Intertwiner,
    PerturbationFamily, Projection, TruncatedSeries,
};
pub use tracking::{eigenvalue_tracking_oracle, track_level, QuadraticFit, TrackedLevel};
