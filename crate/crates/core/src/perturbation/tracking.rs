//! Independent oracle for the perturbed eigenvalue: diagonalize the perturbed
//! operator directly, follow the level by eigenvector overlap and fit a
//! quadratic in `eta`.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::linalg::sym_eigh;
use crate::model::ModelParams;
use crate::operators::SymOp;
use crate::spectral::{lowest_eigenpairs, EigenMethod, SpectralData};

/// Overlap below which tracking is declared lost.
pub const MIN_OVERLAP: f64 = 0.9;

/// Eigenvalue followed along a perturbation family.
#[derive(Clone, Debug)]
pub struct TrackedLevel {
    pub etas: Vec<f64>,
    pub values: Vec<f64>,
    pub overlaps: Vec<f64>,
    /// Index picked by overlap at each eta.
    pub tracked_index: Vec<usize>,
    /// Index minimizing `|lambda(eta) - lambda|` at each eta.
    pub nearest_index: Vec<usize>,
}

impl TrackedLevel {
    /// The overlap choice and the nearest-eigenvalue choice coincide everywhere.
    pub fn selections_agree(&self) -> bool {
        self.tracked_index == self.nearest_index
    }
}

/// Follows eigenvector `index` of `reference` through `family(eta)` for
/// ascending `etas`.
pub fn track_level(
    family: impl Fn(f64) -> Result<SymOp>,
    reference: &SpectralData,
    index: usize,
    etas: &[f64],
    tol_eig: f64,
    seed: u64,
) -> Result<TrackedLevel> {
    let h = reference.grid().spacing();
    let lambda0 = reference.eigenvalues()[index];
    let mut prev: Array1<f64> = reference.eigenvector(index) * h;
    let k = (index + 3).min(reference.grid().dim());
    let mut out = TrackedLevel {
        etas: etas.to_vec(),
        values: Vec::new(),
        overlaps: Vec::new(),
        tracked_index: Vec::new(),
        nearest_index: Vec::new(),
    };
    for &eta in etas {
        let op = family(eta)?;
        let sp = lowest_eigenpairs(&op, k, tol_eig, EigenMethod::Auto, seed)?;
        let vecs = sp.euclidean_vectors();
        let (best, overlap) = (0..sp.len())
            .map(|j| (j, vecs.column(j).dot(&prev).abs()))
            .fold((0, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
        if overlap < MIN_OVERLAP {
            return Err(Error::TrackingLost { eta, overlap });
        }
        let nearest = (0..sp.len())
            .min_by(|a, b| {
                (sp.eigenvalues()[*a] - lambda0)
                    .abs()
                    .total_cmp(&(sp.eigenvalues()[*b] - lambda0).abs())
            })
            .expect("non-empty spectrum");
        prev = vecs.column(best).to_owned();
        out.values.push(sp.eigenvalues()[best]);
        out.overlaps.push(overlap);
        out.tracked_index.push(best);
        out.nearest_index.push(nearest);
    }
    Ok(out)
}

/// Least-squares fit `c0 + c1 eta + c2 eta^2` of a tracked level.
#[derive(Clone, Debug)]
pub struct QuadraticFit {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_residual: f64,
    pub level: TrackedLevel,
}

/// Fits a quadratic in the scaled variable `eta / eta_max`.
pub fn fit_quadratic(level: TrackedLevel) -> Result<QuadraticFit> {
    let n = level.etas.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("quadratic fit needs >= 3 points, got {n}")));
    }
    let eta_max = level.etas.iter().cloned().fold(0.0, f64::max);
    let mut normal = ndarray::Array2::<f64>::zeros((3, 3));
    let mut rhs = Array1::<f64>::zeros(3);
    for (&eta, &y) in level.etas.iter().zip(&level.values) {
        let s = eta / eta_max;
        let row = [1.0, s, s * s];
        for a in 0..3 {
            rhs[a] += row[a] * y;
            for b in 0..3 {
                normal[[a, b]] += row[a] * row[b];
            }
        }
    }
    // the normal matrix is symmetric positive definite; solve through its eigenbasis
    let (w, v) = sym_eigh(&normal)?;
    let coef = v.dot(&(v.t().dot(&rhs) / &w));
    let max_residual = level
        .etas
        .iter()
        .zip(&level.values)
        .map(|(&eta, &y)| {
            let s = eta / eta_max;
            (coef[0] + coef[1] * s + coef[2] * s * s - y).abs()
        })
        .fold(0.0, f64::max);
    Ok(QuadraticFit {
        c0: coef[0],
        c1: coef[1] / eta_max,
        c2: coef[2] / (eta_max * eta_max),
        max_residual,
        level,
    })
}

/// Evenly spaced `count` points in `(0, eta_max]`.
pub fn default_etas(eta_max: f64, count: usize) -> Vec<f64> {
    (1..=count).map(|i| eta_max * i as f64 / count as f64).collect()
}

/// Default sweep end point of the oracle.
pub const ORACLE_ETA_MAX: f64 = 4e-4;

/// Diagonalizes `H + eta (eta + 2 |x|^alpha Theta)` for each `eta` and fits
/// the tracked eigenvalue continuing eigenvector `index` of `spectral`.
pub fn eigenvalue_tracking_oracle(
    h: &SymOp,
    params: &ModelParams,
    spectral: &SpectralData,
    index: usize,
    etas: &[f64],
    tol_eig: f64,
) -> Result<QuadraticFit> {
    if etas.len() < 4 || etas.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidInput("oracle needs at least 4 positive eta values".into()));
    }
    let grid = h.grid().clone();
    let f = grid.tabulate_polar(|r, t| params.field_magnitude(r, t));
    let mut sorted = etas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let family = |eta: f64| {
        let shift: Vec<f64> = f.as_slice().iter().map(|v| eta * (eta + 2.0 * v)).collect();
        h.with_added_diagonal(&shift, 1.0, crate::operators::OperatorKind::Custom(format!("tracking eta={eta}")))
    };
    let level = track_level(family, spectral, index, &sorted, tol_eig, 11)?;
    fit_quadratic(level)
}
