//! Numerical laboratory for the effective dynamics of translationally
//! invariant magnetic Schrödinger operators in the high-field limit.
//!
//! The crate is organised along the computation: [`model`] holds parameters
//! and potentials, [`operators`] assembles the discretised fiber
//! Hamiltonians, [`spectral`] computes and certifies low-lying eigenpairs,
//! [`perturbation`] extracts Rayleigh–Schrödinger coefficients and builds
//! almost invariant subspaces, [`dynamics`] propagates fibered states and
//! runs error studies, and [`cli`] drives batch runs from a TOML scenario.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate openblas_src;

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod operators;
pub mod perturbation;
pub mod spectral;

pub use error::{Error, Result};
pub use model::{
    eval_confining_potential, eval_effective_potential, eval_singular_term, make_model,
    AzimuthalProfile, Grid2D, ModelParams, ScalarField, Stencil, TailSpec,
};
pub use operators::{assemble_fiber_h, assemble_h, h_bound_check, Branch, SymOp};
pub use spectral::{lowest_eigenpairs, EigenMethod, SpectralData};
