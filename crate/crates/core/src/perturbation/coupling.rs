//! Coupling matrix `v = 2 <chi_k^n, |x|^alpha Theta chi_j^l>` and the first two
//! Rayleigh–Schrödinger coefficients of each level.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::sym_eigh;
use crate::model::ModelParams;
use crate::spectral::{Cluster, SpectralData};

use super::resolvent::ReducedResolvent;

/// Couplings between all computed eigenvectors, indexed by eigenvector.
#[derive(Clone, Debug)]
pub struct CouplingTensor {
    matrix: Array2<f64>,
    clusters: Vec<Cluster>,
    /// `2 |x|^alpha Theta` on the grid.
    field: Array1<f64>,
}

impl CouplingTensor {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn field(&self) -> &Array1<f64> {
        &self.field
    }

    /// `v_{k,j}^{n,l}`.
    pub fn entry(&self, n: usize, k: usize, l: usize, j: usize) -> f64 {
        self.matrix[[self.clusters[n].members[k], self.clusters[l].members[j]]]
    }

    /// Block `[v_{k,j}^{n,l}]_{k,j}`.
    pub fn block(&self, n: usize, l: usize) -> Array2<f64> {
        let rows = &self.clusters[n].members;
        let cols = &self.clusters[l].members;
        Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| self.matrix[[rows[a], cols[b]]])
    }

    /// `max |v_{kj}^{nl} - v_{jk}^{ln}|`.
    pub fn symmetry_defect(&self) -> f64 {
        let m = &self.matrix;
        let mut worst = 0.0f64;
        for i in 0..m.nrows() {
            for j in 0..i {
                worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
            }
        }
        worst
    }
}

/// Quadrature of `2 chi |x|^alpha Theta chi' h^2` over every pair of computed eigenvectors.
pub fn coupling_matrix(spectral: &SpectralData, params: &ModelParams) -> CouplingTensor {
    let grid = spectral.grid();
    let field = grid.tabulate_polar(|r, t| 2.0 * params.field_magnitude(r, t)).values().clone();
    let x = spectral.vectors();
    let fx = x * &field.view().insert_axis(ndarray::Axis(1));
    let matrix = x.t().dot(&fx) * grid.cell_area();
    CouplingTensor {
        matrix,
        clusters: spectral.clusters().to_vec(),
        field,
    }
}

/// Rayleigh–Schrödinger data of one cluster.
#[derive(Clone, Debug)]
pub struct RsCoefficients {
    pub cluster: usize,
    pub lambda: f64,
    /// First-order coefficients, one per member, ascending.
    pub lambda1: Vec<f64>,
    /// Second-order coefficients. Uses the exact remainder when a reduced
    /// resolvent was supplied, otherwise the truncated sum.
    pub lambda2: Vec<f64>,
    /// Truncated spectral sums over computed levels below `8 lambda`.
    pub lambda2_truncated: Vec<f64>,
    /// Upper bound on `lambda2_truncated - lambda2` from the next-gap estimate.
    pub tail_bound: Vec<f64>,
    /// Number of computed eigenvalues entering the truncated sum.
    pub levels_used: usize,
    /// Grid-normalized member eigenvectors in the first-order diagonal basis.
    pub basis: Array2<f64>,
}

/// Relative first-order splitting below which a degenerate cluster is refused.
pub const SPLIT_TOL: f64 = 1e-8;

/// Coefficients `lambda_{k,1}^n`, `lambda_{k,2}^n` of cluster `n`.
///
/// Degenerate clusters are re-based onto eigenvectors of the within-cluster
/// coupling block; the second-order formula needs that block to have simple
/// spectrum. With `remainder` the full sum over the spectrum is evaluated as
/// `<g, S g>` for `g = 2 |x|^alpha Theta chi`.
pub fn rs_coefficients(
    coupling: &CouplingTensor,
    spectral: &SpectralData,
    n: usize,
    remainder: Option<&ReducedResolvent>,
) -> Result<RsCoefficients> {
    let clusters = spectral.clusters();
    let cl = clusters
        .get(n)
        .ok_or_else(|| Error::InvalidInput(format!("cluster {n} out of range")))?;
    let lambda = cl.value;
    let m = cl.multiplicity();

    let (mu, rot) = sym_eigh(&coupling.block(n, n))?;
    if m > 1 {
        let scale = 1.0 + mu.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let splitting = mu.windows(2).into_iter().map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if splitting < SPLIT_TOL * scale {
            return Err(Error::DegenerateFirstOrder { cluster: n, splitting });
        }
    }
    let members = &cl.members;
    let x = spectral.vectors();
    let xm = Array2::from_shape_fn((x.nrows(), m), |(i, c)| x[[i, members[c]]]);
    let basis = xm.dot(&rot);

    // rotated couplings to every computed eigenvector
    let rows = Array2::from_shape_fn((m, x.ncols()), |(a, j)| coupling.matrix()[[members[a], j]]);
    let v = rot.t().dot(&rows);

    let cutoff = 8.0 * lambda;
    let evals = spectral.eigenvalues();
    let kept: Vec<usize> = (0..evals.len()).filter(|j| evals[*j] <= cutoff && !members.contains(j)).collect();
    let first_excluded = (0..evals.len())
        .filter(|j| evals[*j] > cutoff)
        .map(|j| evals[j])
        .fold(f64::INFINITY, f64::min);
    let next_level = if first_excluded.is_finite() {
        first_excluded
    } else {
        evals[evals.len() - 1]
    };
    let area = spectral.grid().cell_area();
    let field = coupling.field();

    let mut lambda2 = Vec::with_capacity(m);
    let mut lambda2_truncated = Vec::with_capacity(m);
    let mut tail_bound = Vec::with_capacity(m);
    for k in 0..m {
        let sum: f64 = kept.iter().map(|&j| v[[k, j]] * v[[k, j]] / (evals[j] - lambda)).sum();
        let truncated = 1.0 - sum;
        let g = &basis.column(k) * field;
        let g_norm2 = g.dot(&g) * area;
        let captured: f64 = kept.iter().chain(members.iter()).map(|&j| v[[k, j]] * v[[k, j]]).sum();
        let tail_mass = (g_norm2 - captured).max(0.0);
        let bound = if next_level > lambda { tail_mass / (next_level - lambda) } else { f64::INFINITY };
        let exact = match remainder {
            Some(s) => {
                // Euclidean g = h * grid g
                let ge = &g * spectral.grid().spacing();
                let sg = s.apply(ge.view())?;
                1.0 - ge.dot(&sg)
            }
            None => truncated,
        };
        lambda2.push(exact);
        lambda2_truncated.push(truncated);
        tail_bound.push(if spectral.is_complete() && first_excluded.is_infinite() { 0.0 } else { bound });
    }

    Ok(RsCoefficients {
        cluster: n,
        lambda,
        lambda1: mu.to_vec(),
        lambda2,
        lambda2_truncated,
        tail_bound,
        levels_used: kept.len() + m,
        basis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{eval_confining_potential, make_model, AzimuthalProfile, Grid2D};
    use crate::operators::assemble_h;
    use crate::spectral::{all_eigenpairs, lowest_eigenpairs, EigenMethod};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn harmonic_spectrum(theta: AzimuthalProfile, k: usize) -> (ModelParams, crate::SymOp, SpectralData) {
        let grid = Grid2D::new(6.0, 40).unwrap();
        let m = make_model(1.0, theta, 0.1, None, 1.0).unwrap();
        let h = assemble_h(&grid, &eval_confining_potential(&grid, &m)).unwrap();
        let sp = lowest_eigenpairs(&h, k, 1e-9, EigenMethod::Dense, 0).unwrap().group_degenerate(1e-3).unwrap();
        (m, h, sp)
    }

    #[test]
    fn ground_state_coupling_is_sqrt_pi() {
        let (m, _, sp) = harmonic_spectrum(AzimuthalProfile::constant(1.0).unwrap(), 6);
        let c = coupling_matrix(&sp, &m);
        assert_abs_diff_eq!(c.entry(0, 0, 0, 0), PI.sqrt(), epsilon = 1e-3);
        // odd first excited states against the even ground state
        for j in 0..2 {
            assert_abs_diff_eq!(c.entry(0, 0, 1, j), 0.0, epsilon = 1e-10);
        }
        assert!(c.symmetry_defect() < 1e-10);
    }

    #[test]
    fn first_order_equals_coupling_and_truncation_is_bounded() {
        let (m, h, sp) = harmonic_spectrum(AzimuthalProfile::constant(1.0).unwrap(), 15);
        let c = coupling_matrix(&sp, &m);
        let s = ReducedResolvent::new(&h, &sp, 0).unwrap();
        let rs = rs_coefficients(&c, &sp, 0, Some(&s)).unwrap();
        assert_eq!(rs.lambda1[0], c.entry(0, 0, 0, 0));
        let diff = rs.lambda2_truncated[0] - rs.lambda2[0];
        assert!(diff >= -1e-10 && diff <= rs.tail_bound[0] + 1e-10, "diff {diff} bound {}", rs.tail_bound[0]);

        // with the whole spectrum the truncated sum and the exact remainder agree
        let full = all_eigenpairs(&h).unwrap().group_degenerate(1e-9).unwrap();
        let cf = coupling_matrix(&full, &m);
        let sf = ReducedResolvent::new(&h, &full, 0).unwrap();
        let rf = rs_coefficients(&cf, &full, 0, Some(&sf)).unwrap();
        assert_abs_diff_eq!(rf.lambda2[0], rs.lambda2[0], epsilon = 1e-9);
    }

    #[test]
    fn degenerate_pair_is_rebased_or_refused() {
        let (m, _, sp) = harmonic_spectrum(AzimuthalProfile::constant(1.0).unwrap(), 6);
        let c = coupling_matrix(&sp, &m);
        // the rotationally symmetric first excited pair does not split at first order
        assert!(matches!(rs_coefficients(&c, &sp, 1, None), Err(Error::DegenerateFirstOrder { cluster: 1, .. })));
    }

    #[test]
    fn recomputation_with_scaled_profile_is_consistent() {
        let theta = AzimuthalProfile::cosine_series(&[1.0, 0.0, 0.3]).unwrap();
        let (m, _, sp) = harmonic_spectrum(theta.clone(), 6);
        let scaled = m.with_theta(theta.scaled(1.3).unwrap()).unwrap();
        let grid = sp.grid().clone();
        let h2 = assemble_h(&grid, &eval_confining_potential(&grid, &scaled)).unwrap();
        let sp2 = lowest_eigenpairs(&h2, 6, 1e-9, EigenMethod::Dense, 0).unwrap().group_degenerate(1e-3).unwrap();
        let c2 = coupling_matrix(&sp2, &scaled);
        let rs = rs_coefficients(&c2, &sp2, 0, None).unwrap();
        assert_eq!(rs.lambda1[0], c2.entry(0, 0, 0, 0));
        let direct = 2.0 * grid.cell_area()
            * (0..grid.dim())
                .map(|k| {
                    let (r, t) = grid.polar(k);
                    sp2.vectors()[[k, 0]].powi(2) * scaled.field_magnitude(r, t)
                })
                .sum::<f64>();
        assert_abs_diff_eq!(rs.lambda1[0], direct, epsilon = 1e-12);
    }
}
