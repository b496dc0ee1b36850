//! Low-lying eigenpairs of a [`SymOp`], degeneracy clustering, and numerical
//! surrogates for exponential decay and weighted resolvent bounds.

use ndarray::{s, Array1, Array2, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize, orthonormalize_against, sym_eigh, symmetrize, BandedCholesky, ComplexBandedLu};
use crate::model::Grid2D;
use crate::operators::SymOp;

/// Largest dimension accepted by the dense path.
pub const DENSE_LIMIT: usize = 4096;

/// Default residual tolerance for eigenpairs.
pub const DEFAULT_TOL_EIG: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigenMethod {
    /// Dense for `d <= 1024`, shift-invert Lanczos above.
    Auto,
    /// Shift-invert block Lanczos on a banded Cholesky factor.
    Lanczos,
    /// Full dense diagonalization.
    Dense,
}

/// Group of (nearly) equal eigenvalues.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    /// Mean of the member eigenvalues.
    pub value: f64,
    pub members: Vec<usize>,
    /// False when the cluster touches the top of the computed spectrum and
    /// could continue beyond it.
    pub closed: bool,
}

impl Cluster {
    pub fn multiplicity(&self) -> usize {
        self.members.len()
    }
}

/// Isolation data of a cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct GapInfo {
    pub target: f64,
    /// Distance to the rest of the computed spectrum.
    pub gap: f64,
    pub contour_radius: f64,
    /// False if no computed eigenvalue lies above the cluster.
    pub upper_known: bool,
}

/// Computed eigenpairs of one operator.
#[derive(Clone, Debug)]
pub struct SpectralData {
    grid: Grid2D,
    eigenvalues: Array1<f64>,
    /// Columns normalized with the grid weight: `h^2 sum chi^2 = 1`.
    vectors: Array2<f64>,
    residuals: Vec<f64>,
    clusters: Vec<Cluster>,
    /// All eigenpairs of the operator are present.
    complete: bool,
}

impl SpectralData {
    fn from_euclidean(op: &SymOp, values: Array1<f64>, mut vecs: Array2<f64>, complete: bool) -> Self {
        for mut col in vecs.columns_mut() {
            let (imax, _) = col
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
            if col[imax] < 0.0 {
                col.mapv_inplace(|v| -v);
            }
        }
        let av = op.apply_columns(&vecs);
        let residuals = (0..values.len())
            .map(|j| {
                let r = &av.column(j) - &(&vecs.column(j) * values[j]);
                r.dot(&r).sqrt()
            })
            .collect();
        let h = op.grid().spacing();
        let clusters = (0..values.len())
            .map(|j| Cluster {
                value: values[j],
                members: vec![j],
                closed: complete || j + 1 < values.len(),
            })
            .collect();
        SpectralData {
            grid: op.grid().clone(),
            eigenvalues: values,
            vectors: vecs / h,
            residuals,
            clusters,
            complete,
        }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    /// Grid-normalized eigenvectors as columns.
    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    /// Eigenvectors scaled to unit Euclidean norm.
    pub fn euclidean_vectors(&self) -> Array2<f64> {
        &self.vectors * self.grid.spacing()
    }

    pub fn eigenvector(&self, j: usize) -> Array1<f64> {
        self.vectors.column(j).to_owned()
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    /// Largest deviation of the grid Gram matrix from the identity.
    pub fn gram_defect(&self) -> f64 {
        let g = self.vectors.t().dot(&self.vectors) * self.grid.cell_area();
        let mut m = 0.0f64;
        for ((i, j), v) in g.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            m = m.max((v - target).abs());
        }
        m
    }

    /// Clusters of eigenvalues closer than `gap_tol`.
    pub fn group_degenerate(mut self, gap_tol: f64) -> Result<Self> {
        let clusters = group_values(self.eigenvalues.as_slice().expect("contiguous"), gap_tol)?;
        let top = self.len() - 1;
        self.clusters = clusters
            .into_iter()
            .map(|mut cl| {
                cl.closed = self.complete || !cl.members.contains(&top);
                cl
            })
            .collect();
        Ok(self)
    }

    pub fn gap_info(&self, cluster: usize) -> Result<GapInfo> {
        let cl = self
            .clusters
            .get(cluster)
            .ok_or_else(|| Error::InvalidInput(format!("cluster {cluster} out of range ({} clusters)", self.clusters.len())))?;
        let lo = cl.members[0];
        let hi = *cl.members.last().expect("non-empty cluster");
        let below = if lo > 0 {
            self.eigenvalues[lo] - self.eigenvalues[lo - 1]
        } else {
            f64::INFINITY
        };
        let upper_known = hi + 1 < self.len();
        let above = if upper_known {
            self.eigenvalues[hi + 1] - self.eigenvalues[hi]
        } else {
            f64::INFINITY
        };
        let gap = below.min(above);
        Ok(GapInfo {
            target: cl.value,
            gap,
            contour_radius: gap / 2.0,
            upper_known,
        })
    }

    /// Orthogonal projection onto a cluster, as unit-Euclidean basis columns.
    pub fn cluster_basis(&self, cluster: usize) -> Array2<f64> {
        let h = self.grid.spacing();
        let members = &self.clusters[cluster].members;
        let mut b = Array2::zeros((self.grid.dim(), members.len()));
        for (c, &m) in members.iter().enumerate() {
            b.column_mut(c).assign(&(&self.vectors.column(m) * h));
        }
        b
    }
}

/// Sorts `values` and clusters consecutive gaps below `gap_tol`.
pub fn group_values(values: &[f64], gap_tol: f64) -> Result<Vec<Cluster>> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut clusters: Vec<Cluster> = Vec::new();
    for (pos, &idx) in order.iter().enumerate() {
        if pos > 0 {
            let gap = values[idx] - values[order[pos - 1]];
            if gap < gap_tol {
                clusters.last_mut().expect("open cluster").members.push(idx);
                continue;
            }
            if gap < 2.0 * gap_tol {
                return Err(Error::AmbiguousCluster {
                    index: pos - 1,
                    gap,
                    gap_tol,
                });
            }
        }
        clusters.push(Cluster {
            value: 0.0,
            members: vec![idx],
            closed: true,
        });
    }
    for cl in &mut clusters {
        cl.value = cl.members.iter().map(|&m| values[m]).sum::<f64>() / cl.members.len() as f64;
    }
    Ok(clusters)
}

/// The `k` lowest eigenpairs of `op` with residuals below `tol_eig`.
pub fn lowest_eigenpairs(op: &SymOp, k: usize, tol_eig: f64, method: EigenMethod, seed: u64) -> Result<SpectralData> {
    let d = op.dim();
    if k == 0 || k > d {
        return Err(Error::InvalidInput(format!("need 1 <= k <= {d}, got k = {k}")));
    }
    let method = match method {
        EigenMethod::Auto if d <= 1024 => EigenMethod::Dense,
        EigenMethod::Auto => EigenMethod::Lanczos,
        m => m,
    };
    let data = match method {
        EigenMethod::Dense => dense_eigenpairs(op, k)?,
        _ => lanczos_eigenpairs(op, k, tol_eig, seed)?,
    };
    if data.max_residual() > tol_eig {
        return Err(Error::NoConvergence {
            what: "eigenpair residual",
            iterations: 0,
            residual: data.max_residual(),
        });
    }
    Ok(data)
}

/// All eigenpairs through dense diagonalization.
pub fn all_eigenpairs(op: &SymOp) -> Result<SpectralData> {
    dense_eigenpairs(op, op.dim())
}

fn dense_eigenpairs(op: &SymOp, k: usize) -> Result<SpectralData> {
    let d = op.dim();
    if d > DENSE_LIMIT {
        return Err(Error::InvalidInput(format!("dense path limited to d <= {DENSE_LIMIT}, got {d}")));
    }
    let (w, v) = sym_eigh(&op.to_dense())?;
    let w = w.slice(s![..k]).to_owned();
    let v = v.slice(s![.., ..k]).to_owned();
    Ok(SpectralData::from_euclidean(op, w, v, k == d))
}

const LANCZOS_BLOCKS: usize = 6;
const LANCZOS_RESTARTS: usize = 60;

fn lanczos_eigenpairs(op: &SymOp, k: usize, tol: f64, seed: u64) -> Result<SpectralData> {
    let d = op.dim();
    let b = (k + 2).max(4).min(d);
    // -Laplace_h >= 0, so H - sigma >= 1 for sigma = min V - 1
    let sigma = op.potential().iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let chol = BandedCholesky::factor(op, sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Array2::from_shape_fn((d, b), |_| StandardNormal.sample(&mut rng));
    let mut x = orthonormalize(start.view(), 1e-10);
    let mut worst = f64::INFINITY;
    for _ in 0..LANCZOS_RESTARTS {
        let mut basis = x.clone();
        let mut block = x.clone();
        for _ in 1..LANCZOS_BLOCKS {
            let y = chol.solve_columns(&block)?;
            let fresh = orthonormalize_against(Some(basis.view()), y.view(), 1e-13);
            if fresh.ncols() == 0 {
                break;
            }
            basis = ndarray::concatenate![Axis(1), basis, fresh];
            block = fresh;
        }
        let ab = op.apply_columns(&basis);
        let t = symmetrize(&basis.t().dot(&ab));
        let (theta, s) = sym_eigh(&t)?;
        let keep = b.min(theta.len());
        let sk = s.slice(s![.., ..keep]);
        let ritz = basis.dot(&sk);
        let aritz = ab.dot(&sk);
        worst = (0..k)
            .map(|j| {
                let r = &aritz.column(j) - &(&ritz.column(j) * theta[j]);
                r.dot(&r).sqrt()
            })
            .fold(0.0, f64::max);
        if worst <= tol {
            let values = theta.slice(s![..k]).to_owned();
            let vecs = ritz.slice(s![.., ..k]).to_owned();
            return Ok(SpectralData::from_euclidean(op, values, vecs, k == d));
        }
        x = ritz;
    }
    Err(Error::NoConvergence {
        what: "shift-invert block Lanczos",
        iterations: LANCZOS_RESTARTS,
        residual: worst,
    })
}

/// Exponential-decay diagnostics of one eigenfunction.
#[derive(Clone, Debug)]
pub struct DecayReport {
    pub omegas: Vec<f64>,
    /// Grid norms of `exp(omega <x>) chi`.
    pub weighted_norms: Vec<f64>,
    /// Least-squares slope of `log |chi|` against `r` over annular averages.
    pub slope_r: f64,
    /// Same against `r^2` (`-1/2` for a Gaussian).
    pub slope_r2: f64,
    /// Squared grid norm of `chi` on the shell `max(|x1|, |x2|) >= 0.9 L`.
    pub boundary_mass: f64,
    /// `(mean r, mean |chi|)` per annulus used in the fits.
    pub annuli: Vec<(f64, f64)>,
}

fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Decay diagnostics for a grid-normalized eigenfunction.
pub fn decay_profile(chi: &[f64], grid: &Grid2D, omegas: &[f64]) -> Result<DecayReport> {
    if chi.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            found: chi.len(),
        });
    }
    let area = grid.cell_area();
    let weighted_norms = omegas
        .iter()
        .map(|&w| {
            let s: f64 = chi
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let (r, _) = grid.polar(k);
                    let e = (w * (1.0 + r * r).sqrt()).exp() * c;
                    e * e
                })
                .sum();
            (s * area).sqrt()
        })
        .collect();

    let l = grid.half_width();
    let shell = 0.9 * l;
    let boundary_mass = area
        * chi
            .iter()
            .enumerate()
            .filter(|(k, _)| {
                let (x, y) = grid.node(*k);
                x.abs().max(y.abs()) >= shell
            })
            .map(|(_, c)| c * c)
            .sum::<f64>();

    let (r_lo, r_hi) = (0.2 * l, 0.8 * l);
    let bins = 24;
    let width = (r_hi - r_lo) / bins as f64;
    let mut acc = vec![(0.0, 0.0, 0.0, 0usize); bins];
    for (k, c) in chi.iter().enumerate() {
        let (r, _) = grid.polar(k);
        if r < r_lo || r >= r_hi {
            continue;
        }
        let b = (((r - r_lo) / width) as usize).min(bins - 1);
        let e = &mut acc[b];
        e.0 += r;
        e.1 += r * r;
        e.2 += c.abs();
        e.3 += 1;
    }
    let mut annuli = Vec::new();
    let (mut xs, mut x2s, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for (sr, sr2, sc, cnt) in acc {
        if cnt == 0 || sc <= 0.0 {
            continue;
        }
        let n = cnt as f64;
        annuli.push((sr / n, sc / n));
        xs.push(sr / n);
        x2s.push(sr2 / n);
        ys.push((sc / n).ln());
    }
    if xs.len() < 2 {
        return Err(Error::InvalidInput("too few populated annuli for a decay fit".into()));
    }
    Ok(DecayReport {
        omegas: omegas.to_vec(),
        weighted_norms,
        slope_r: ls_slope(&xs, &ys),
        slope_r2: ls_slope(&x2s, &ys),
        boundary_mass,
        annuli,
    })
}

/// Relative tolerance of the power iteration in [`weighted_resolvent_norm`].
pub const RESOLVENT_POWER_TOL: f64 = 1e-9;

/// Estimates `|| exp(omega <x>) (H - z)^{-1} exp(-omega <x>) ||` by power
/// iteration on `M^* M`. `spectrum`, if given, is used to refuse shifts that
/// sit on a computed eigenvalue.
pub fn weighted_resolvent_norm(op: &SymOp, z: Complex64, omega: f64, spectrum: Option<&SpectralData>, seed: u64) -> Result<f64> {
    if let Some(sp) = spectrum {
        let dist = sp
            .eigenvalues()
            .iter()
            .map(|l| (Complex64::new(*l, 0.0) - z).norm())
            .fold(f64::INFINITY, f64::min);
        if dist < 1e-8 * (1.0 + z.norm()) {
            return Err(Error::SingularShift {
                shift: format!("{z}"),
                distance: dist,
            });
        }
    }
    let grid = op.grid();
    let d = op.dim();
    let weight: Vec<f64> = (0..d)
        .map(|k| {
            let (r, _) = grid.polar(k);
            (omega * (1.0 + r * r).sqrt()).exp()
        })
        .collect();

    enum Solver {
        Real(BandedCholesky),
        Complex(ComplexBandedLu),
    }
    let solver = if z.im == 0.0 {
        match BandedCholesky::factor(op, z.re) {
            Ok(c) => Solver::Real(c),
            Err(Error::SingularShift { .. }) => Solver::Complex(ComplexBandedLu::factor(op, z)?),
            Err(e) => return Err(e),
        }
    } else {
        Solver::Complex(ComplexBandedLu::factor(op, z)?)
    };
    let solve = |v: &mut Vec<Complex64>, adjoint: bool| -> Result<()> {
        match &solver {
            Solver::Real(c) => {
                let mut buf: Vec<f64> = v.iter().map(|c| c.re).chain(v.iter().map(|c| c.im)).collect();
                c.solve_in_place(&mut buf, 2)?;
                for (i, x) in v.iter_mut().enumerate() {
                    *x = Complex64::new(buf[i], buf[d + i]);
                }
                Ok(())
            }
            Solver::Complex(lu) => lu.solve_in_place(v, adjoint),
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<Complex64> = (0..d).map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0)).collect();
    let normalize = |x: &mut Vec<Complex64>| -> f64 {
        let n = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        x.iter_mut().for_each(|c| *c /= n);
        n
    };
    normalize(&mut x);
    let mut estimate = 0.0;
    let budget = 5000;
    for it in 0..budget {
        // y = M x
        let mut y: Vec<Complex64> = x.iter().zip(&weight).map(|(c, w)| c / w).collect();
        solve(&mut y, false)?;
        y.iter_mut().zip(&weight).for_each(|(c, w)| *c *= w);
        let my = y.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        // x = M^* y
        let mut next: Vec<Complex64> = y.iter().zip(&weight).map(|(c, w)| c * w).collect();
        solve(&mut next, true)?;
        next.iter_mut().zip(&weight).for_each(|(c, w)| *c /= w);
        normalize(&mut next);
        x = next;
        if it > 2 && (my - estimate).abs() <= RESOLVENT_POWER_TOL * my {
            return Ok(my);
        }
        estimate = my;
    }
    Err(Error::NoConvergence {
        what: "weighted resolvent power iteration",
        iterations: budget,
        residual: estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{eval_confining_potential, make_model, AzimuthalProfile, Stencil};
    use crate::operators::assemble_h;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn harmonic_h(l: f64, n: usize) -> SymOp {
        let grid = Grid2D::new(l, n).unwrap();
        let m = make_model(1.0, AzimuthalProfile::constant(1.0).unwrap(), 0.1, None, 1.5).unwrap();
        assemble_h(&grid, &eval_confining_potential(&grid, &m)).unwrap()
    }

    #[test]
    fn laplacian_ground_state_matches_discrete_formula() {
        for stencil in [Stencil::FivePoint, Stencil::FourthOrder] {
            let grid = Grid2D::new(PI / 2.0, 24).unwrap().with_stencil(stencil);
            let h = assemble_h(&grid, &crate::ScalarField::new(Array1::zeros(grid.dim()))).unwrap();
            let sp = lowest_eigenpairs(&h, 1, 1e-9, EigenMethod::Lanczos, 1).unwrap();
            let theta = PI / (grid.n() + 1) as f64;
            let symbol = match stencil {
                Stencil::FivePoint => 2.0 - 2.0 * theta.cos(),
                Stencil::FourthOrder => 2.5 - 8.0 / 3.0 * theta.cos() + (2.0 * theta).cos() / 6.0,
            };
            let expected = 2.0 * symbol / grid.cell_area();
            assert_abs_diff_eq!(sp.eigenvalues()[0], expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn lanczos_agrees_with_dense() {
        let h = harmonic_h(6.0, 32);
        let dense = lowest_eigenpairs(&h, 8, 1e-9, EigenMethod::Dense, 0).unwrap();
        let lan = lowest_eigenpairs(&h, 8, 1e-9, EigenMethod::Lanczos, 5).unwrap();
        for j in 0..8 {
            assert_abs_diff_eq!(dense.eigenvalues()[j], lan.eigenvalues()[j], epsilon = 1e-10);
        }
        assert!(lan.gram_defect() < 1e-10);
        assert!(lan.eigenvalues().iter().all(|v| *v > 0.0));
        // the non-degenerate ground state agrees including its sign convention
        let diff = &dense.eigenvector(0) - &lan.eigenvector(0);
        assert!(diff.iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn clustering_examples() {
        let cl = group_values(&[2.0, 4.0001, 3.9999, 6.0, 8.0], 1e-2).unwrap();
        let m: Vec<usize> = cl.iter().map(Cluster::multiplicity).collect();
        assert_eq!(m, vec![1, 2, 1, 1]);
        assert_abs_diff_eq!(cl[1].value, 4.0, epsilon = 1e-12);
        let cl = group_values(&[1.0, 2.0, 3.0], 1e-6).unwrap();
        assert!(cl.iter().all(|c| c.multiplicity() == 1));
        assert!(matches!(group_values(&[1.0, 1.015], 1e-2), Err(Error::AmbiguousCluster { index: 0, .. })));
    }

    #[test]
    fn anisotropy_splits_pairs() {
        let grid = Grid2D::new(6.0, 32).unwrap();
        let m = make_model(1.0, AzimuthalProfile::cosine_series(&[1.0, 0.0, 0.3]).unwrap(), 0.1, None, 1.5).unwrap();
        let h = assemble_h(&grid, &eval_confining_potential(&grid, &m)).unwrap();
        let sp = lowest_eigenpairs(&h, 4, 1e-9, EigenMethod::Dense, 0).unwrap();
        assert!((sp.eigenvalues()[2] - sp.eigenvalues()[1]).abs() > 1e-3);
    }

    #[test]
    fn gap_info_of_ground_state() {
        let h = harmonic_h(6.0, 32);
        let sp = lowest_eigenpairs(&h, 6, 1e-9, EigenMethod::Dense, 0).unwrap().group_degenerate(1e-2).unwrap();
        let g = sp.gap_info(0).unwrap();
        assert!(g.upper_known);
        assert_abs_diff_eq!(g.gap, 2.0, epsilon = 1e-2);
        assert_eq!(g.contour_radius, g.gap / 2.0);
        let top = sp.clusters().len() - 1;
        assert!(!sp.gap_info(top).unwrap().upper_known);
        assert!(!sp.clusters()[top].closed);
    }

    #[test]
    fn decay_of_ground_state() {
        let h = harmonic_h(6.0, 40);
        let sp = lowest_eigenpairs(&h, 1, 1e-9, EigenMethod::Dense, 0).unwrap();
        let rep = decay_profile(sp.eigenvector(0).as_slice().unwrap(), h.grid(), &[0.0, 0.5, 1.0]).unwrap();
        assert_abs_diff_eq!(rep.weighted_norms[0], 1.0, epsilon = 1e-12);
        assert!(rep.weighted_norms.windows(2).all(|w| w[1] > w[0]));
        assert!((rep.slope_r2 + 0.5).abs() < 0.05, "slope {}", rep.slope_r2);
        assert!(rep.boundary_mass < 1e-10);
    }

    #[test]
    fn resolvent_norm_is_inverse_distance() {
        let h = harmonic_h(6.0, 32);
        let sp = lowest_eigenpairs(&h, 2, 1e-9, EigenMethod::Dense, 0).unwrap();
        let l0 = sp.eigenvalues()[0];
        let r = weighted_resolvent_norm(&h, Complex64::new(-1.0, 0.0), 0.0, Some(&sp), 1).unwrap();
        assert_abs_diff_eq!(r * (l0 + 1.0), 1.0, epsilon = 1e-6);
        let r = weighted_resolvent_norm(&h, Complex64::new(l0 - 1.0, 0.0), 0.0, Some(&sp), 1).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-6);
        // between two levels the real shift is indefinite and takes the LU path
        let mid = 0.5 * (sp.eigenvalues()[0] + sp.eigenvalues()[1]);
        let r = weighted_resolvent_norm(&h, Complex64::new(mid, 0.0), 0.0, Some(&sp), 1).unwrap();
        assert_abs_diff_eq!(r * (mid - l0), 1.0, epsilon = 1e-6);
        let w = weighted_resolvent_norm(&h, Complex64::new(-1.0, 0.5), 0.1, Some(&sp), 1).unwrap();
        assert!(w.is_finite() && w > 0.0);
        assert!(matches!(
            weighted_resolvent_norm(&h, Complex64::new(l0, 0.0), 0.0, Some(&sp), 1),
            Err(Error::SingularShift { .. })
        ));
    }
}
