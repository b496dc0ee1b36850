//! Truncated perturbation series for the spectral projection of
//! `H^eta = H + eta V`, its lift to an orthogonal projection, commutator
//! defects, and the Sz-Nagy intertwiner between nearby projections.
//!
//! Operators are kept as thin factors `L R^T` over the Euclidean grid space.
//! Every summand of `Q_j` contains at least one factor `P_lambda`, which is
//! what makes the factored form possible.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize, spectral_norm, sym_eigh, sym_norm, symmetrize, LowRank};
use crate::model::{Grid2D, ModelParams};
use crate::operators::{perturbation_field, Branch, OperatorKind, SymOp};

use super::resolvent::ReducedResolvent;

/// The family `eta -> H + eta V(eta)` at fixed momentum.
///
/// `V = p Vhat + eta^(gamma-alpha-1) W` is evaluated at `eps = eta^(alpha+1)`.
#[derive(Clone, Debug)]
pub struct PerturbationFamily {
    pub h: SymOp,
    pub params: ModelParams,
    pub p: f64,
    pub branch: Branch,
}

impl PerturbationFamily {
    pub fn new(h: &SymOp, params: &ModelParams, p: f64, branch: Branch) -> Result<Self> {
        if branch == Branch::Singular && params.tail().is_none() {
            return Err(Error::TailMissing);
        }
        Ok(PerturbationFamily {
            h: h.clone(),
            params: params.clone(),
            p,
            branch,
        })
    }

    pub fn grid(&self) -> &Grid2D {
        self.h.grid()
    }

    /// Diagonal of `V` at `eta > 0`.
    pub fn potential(&self, eta: f64) -> Result<Array1<f64>> {
        let eps = eta.powf(self.params.alpha() + 1.0).min(1.0);
        let params = self.params.with_epsilon(eps)?;
        Ok(perturbation_field(self.grid(), &params, self.p, self.branch)?.values().clone())
    }

    /// `H + eta V(eta)`.
    pub fn operator(&self, eta: f64) -> Result<SymOp> {
        if eta == 0.0 {
            return Ok(self.h.clone());
        }
        let v = self.potential(eta)?;
        self.h.with_added_diagonal(
            v.as_slice().expect("contiguous"),
            eta,
            OperatorKind::Fiber {
                p: self.p,
                epsilon: eta.powf(self.params.alpha() + 1.0),
                branch: self.branch,
            },
        )
    }
}

/// Orthogonal projection `Phi Phi^T` with orthonormal `Phi`.
#[derive(Clone, Debug)]
pub struct Projection {
    basis: Array2<f64>,
}

impl Projection {
    /// Projection onto the span of the columns.
    pub fn onto(cols: &Array2<f64>) -> Self {
        Projection {
            basis: orthonormalize(cols.view(), 1e-12),
        }
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn apply(&self, x: &[f64]) -> Array1<f64> {
        self.basis.dot(&self.basis.t().dot(&ndarray::ArrayView1::from(x)))
    }

    pub fn to_low_rank(&self) -> LowRank {
        LowRank::gram(&self.basis)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.basis.dot(&self.basis.t())
    }

    /// `|P^2 - P|`.
    pub fn idempotency_defect(&self) -> Result<f64> {
        let g = self.basis.t().dot(&self.basis);
        let w = crate::linalg::sym_eigvals(&g)?;
        Ok(w.iter().map(|x| (x * (x - 1.0)).abs()).fold(0.0, f64::max))
    }

    /// `|P - Q|`.
    pub fn distance(&self, other: &Projection) -> Result<f64> {
        let diff = self.to_low_rank().add(&other.to_low_rank().scaled(-1.0));
        let (_, c) = diff.compress();
        sym_norm(&symmetrize(&c))
    }
}

/// All `(parts)`-tuples of non-negative integers summing to `total`.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn scale_rows(x: &Array2<f64>, v: &Array1<f64>) -> Array2<f64> {
    x * &v.view().insert_axis(Axis(1))
}

/// Applies `X_1 V X_2 V ... X_k V` to `x`, innermost factor last in `factors`.
fn apply_chain(res: &ReducedResolvent, v: &Array1<f64>, factors: &[usize], x: &Array2<f64>) -> Result<Array2<f64>> {
    let p = res.cluster_basis();
    let mut cur = x.clone();
    for &nu in factors.iter().rev() {
        cur = scale_rows(&cur, v);
        if nu == 0 {
            cur = p.dot(&p.t().dot(&cur));
        } else {
            for _ in 0..nu {
                cur = res.apply_columns(&cur)?;
            }
        }
    }
    Ok(cur)
}

/// `Q_j = (-1)^{j+1} sum S^{nu_1} V S^{nu_2} ... V S^{nu_{j+1}}` over
/// compositions of `j`, with `S^0 = -P_lambda`.
pub fn series_term_q(j: usize, res: &ReducedResolvent, v: &Array1<f64>) -> Result<LowRank> {
    let phi = res.cluster_basis();
    let mut acc = LowRank::zero(res.dim());
    for nus in compositions(j, j + 1) {
        let zeros = nus.iter().filter(|n| **n == 0).count();
        let first = nus.iter().position(|n| *n == 0).expect("every composition of j into j+1 parts has a zero");
        let sign = if (j + 1 + zeros).is_multiple_of(2) { 1.0 } else { -1.0 };
        // term = [X_1 V ... X_{first-1} V] Phi Phi^T [V X_{first+1} ... V X_{j+1}]
        let left = apply_chain(res, v, &nus[..first], phi)?;
        let right_factors: Vec<usize> = nus[first + 1..].iter().rev().copied().collect();
        let right = apply_chain(res, v, &right_factors, phi)?;
        acc = acc.add(&LowRank::new(left * sign, right));
    }
    Ok(acc)
}

/// `Q_0, ..., Q_n`.
pub fn series_terms(n: usize, res: &ReducedResolvent, v: &Array1<f64>) -> Result<Vec<LowRank>> {
    (0..=n).map(|j| series_term_q(j, res, v)).collect()
}

/// `|Q_j - sum_{l=0}^{j} Q_l Q_{j-l}|`.
pub fn q_recursion_residual(qs: &[LowRank], j: usize) -> Result<f64> {
    let mut acc = qs[j].clone();
    for l in 0..=j {
        acc = acc.add(&qs[l].compose(&qs[j - l]).scaled(-1.0));
    }
    acc.norm()
}

/// Largest `|[H, Q_{j+1}] u + [V, Q_j] u|` over the unit columns `u` of `tests`.
pub fn commutator_recursion_residual(h: &SymOp, v: &Array1<f64>, qs: &[LowRank], j: usize, tests: &Array2<f64>) -> Result<f64> {
    let mut worst = 0.0f64;
    for u in tests.columns() {
        let u = &u / u.dot(&u).sqrt();
        let q1u = qs[j + 1].apply(u.as_slice().expect("contiguous"));
        let hu = Array1::from(h.apply_vec(u.as_slice().expect("contiguous")));
        let hq = Array1::from(h.apply_vec(q1u.as_slice().expect("contiguous")));
        let qh = qs[j + 1].apply(hu.as_slice().expect("contiguous"));
        let qu = qs[j].apply(u.as_slice().expect("contiguous"));
        let vu = &u * v;
        let vq = &qu * v;
        let qv = qs[j].apply(vu.as_slice().expect("contiguous"));
        let r = &hq - &qh + &vq - &qv;
        worst = worst.max(r.dot(&r).sqrt());
    }
    Ok(worst)
}

/// `T_N = sum_j eta^j Q_j` in compressed form `W C W^T`.
#[derive(Clone, Debug)]
pub struct TruncatedSeries {
    pub eta: f64,
    pub order: usize,
    pub basis: Array2<f64>,
    pub core: Array2<f64>,
    /// `|T_N^2 - T_N|`.
    pub defect: f64,
}

impl TruncatedSeries {
    pub fn to_dense(&self) -> Array2<f64> {
        self.basis.dot(&self.core).dot(&self.basis.t())
    }
}

pub fn truncated_series_t(eta: f64, qs: &[LowRank]) -> Result<TruncatedSeries> {
    let mut sum = LowRank::zero(qs[0].dim());
    for (j, q) in qs.iter().enumerate() {
        sum = sum.add(&q.scaled(eta.powi(j as i32)));
    }
    let (w, c) = sum.compress();
    let c = symmetrize(&c);
    let defect = sym_norm(&(c.dot(&c) - &c))?;
    Ok(TruncatedSeries {
        eta,
        order: qs.len() - 1,
        basis: w,
        core: c,
        defect,
    })
}

/// Orthogonal projection obtained from an almost projection.
#[derive(Clone, Debug)]
pub struct AlmostProjection {
    pub projection: Projection,
    /// `|P_N - T_N|`.
    pub distance_to_t: f64,
    pub defect: f64,
}

/// Defect threshold below which the spectral lift is well defined.
pub const MAX_DEFECT: f64 = 1.0 / 8.0;

/// Spectral projection of `T_N` onto eigenvalues in `|z - 1| < 1/2`.
pub fn almost_projection_p(t: &TruncatedSeries) -> Result<AlmostProjection> {
    if !(t.defect < MAX_DEFECT) {
        return Err(Error::DefectTooLarge { defect: t.defect });
    }
    let (mu, y) = sym_eigh(&t.core)?;
    let keep: Vec<usize> = (0..mu.len()).filter(|&i| (mu[i] - 1.0).abs() < 0.5).collect();
    let ysel = Array2::from_shape_fn((y.nrows(), keep.len()), |(r, c)| y[[r, keep[c]]]);
    let diff = ysel.dot(&ysel.t()) - &t.core;
    Ok(AlmostProjection {
        projection: Projection {
            basis: t.basis.dot(&ysel),
        },
        distance_to_t: sym_norm(&symmetrize(&diff))?,
        defect: t.defect,
    })
}

/// `|A P - P A|` for a sparse symmetric `A`.
pub fn commutator_defect(op: &SymOp, p: &Projection) -> Result<f64> {
    p.to_low_rank().commutator_norm(op)
}

/// Unitary `U = 1 + W (U_w - 1) W^T` with `U P U^T = Q`.
#[derive(Clone, Debug)]
pub struct Intertwiner {
    pub basis: Array2<f64>,
    pub core: Array2<f64>,
    p_core: Array2<f64>,
    q_core: Array2<f64>,
}

impl Intertwiner {
    pub fn apply(&self, x: &[f64]) -> Array1<f64> {
        let x = ndarray::ArrayView1::from(x);
        let c = self.basis.t().dot(&x);
        let uc = self.core.dot(&c) - &c;
        &x + &self.basis.dot(&uc)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let d = self.basis.nrows();
        let k = self.core.ncols();
        Array2::<f64>::eye(d) + self.basis.dot(&(&self.core - &Array2::<f64>::eye(k))).dot(&self.basis.t())
    }

    /// `|U^T U - 1|`.
    pub fn unitarity_defect(&self) -> Result<f64> {
        let k = self.core.ncols();
        spectral_norm((self.core.t().dot(&self.core) - Array2::<f64>::eye(k)).view())
    }

    /// `|U P U^T - Q|`.
    pub fn intertwining_residual(&self) -> Result<f64> {
        let r = self.core.dot(&self.p_core).dot(&self.core.t()) - &self.q_core;
        spectral_norm(r.view())
    }

    /// `|1 - U|`.
    pub fn distance_from_identity(&self) -> Result<f64> {
        let k = self.core.ncols();
        spectral_norm((&self.core - &Array2::<f64>::eye(k)).view())
    }
}

/// `U = (1 - (Q - P)^2)^{-1/2} (Q P + (1 - Q)(1 - P))`, mapping `ran P` onto `ran Q`.
pub fn sz_nagy_intertwiner(p: &Projection, q: &Projection) -> Result<Intertwiner> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: q.dim(),
        });
    }
    let w = orthonormalize(ndarray::concatenate![Axis(1), *p.basis(), *q.basis()].view(), 1e-12);
    let k = w.ncols();
    let pb = w.t().dot(p.basis());
    let qb = w.t().dot(q.basis());
    let pc = pb.dot(&pb.t());
    let qc = qb.dot(&qb.t());
    let diff = &qc - &pc;
    let distance = sym_norm(&symmetrize(&diff))?;
    if distance >= 1.0 - 1e-12 {
        return Err(Error::ProjectionsTooFar { distance });
    }
    let eye = Array2::<f64>::eye(k);
    let a = symmetrize(&(&eye - &diff.dot(&diff)));
    let (mu, z) = sym_eigh(&a)?;
    let inv_sqrt = z.dot(&Array2::from_diag(&mu.mapv(|m| 1.0 / m.sqrt()))).dot(&z.t());
    let core = inv_sqrt.dot(&(qc.dot(&pc) + (&eye - &qc).dot(&(&eye - &pc))));
    Ok(Intertwiner {
        basis: w,
        core,
        p_core: pc,
        q_core: qc,
    })
}

/// Effective eigenpair of a rank-one almost invariant subspace.
#[derive(Clone, Debug)]
pub struct EffectiveEigenpair {
    /// `Tr(P_N H P_N)`.
    pub lambda: f64,
    /// `U chi_ref` (Euclidean normalization).
    pub chi: Array1<f64>,
    /// `|P_N H P_N chi - lambda chi|`.
    pub residual: f64,
}

/// `lambda = Tr(P_N H P_N)` and `chi = U chi_ref` with `U` intertwining `P_lambda` and `P_N`.
pub fn effective_eigenpair(p_n: &Projection, op: &SymOp, p_lambda: &Projection, chi_ref: &[f64]) -> Result<EffectiveEigenpair> {
    if p_n.rank() != 1 {
        return Err(Error::RankMismatch {
            expected: 1,
            found: p_n.rank(),
        });
    }
    let phi = p_n.basis().column(0).to_owned();
    let hphi = Array1::from(op.apply_vec(phi.as_slice().expect("contiguous")));
    let lambda = phi.dot(&hphi);
    let u = sz_nagy_intertwiner(p_lambda, p_n)?;
    let chi = u.apply(chi_ref);
    // P H P chi = (phi^T H phi)(phi^T chi) phi
    let php = &phi * (lambda * phi.dot(&chi));
    let r = &php - &(&chi * lambda);
    Ok(EffectiveEigenpair {
        lambda,
        chi,
        residual: r.dot(&r).sqrt(),
    })
}

/// One row of an almost-invariance sweep.
#[derive(Clone, Debug)]
pub struct DefectRow {
    pub order: usize,
    pub eta: f64,
    pub t_defect: f64,
    pub commutator: f64,
    pub p_idempotency: f64,
    pub p_minus_t: f64,
    pub rank: usize,
}

/// Defects of `T_N` and `P_N` for every order `0..=max_order` and every `eta`.
pub fn almost_invariance_sweep(family: &PerturbationFamily, res: &ReducedResolvent, max_order: usize, etas: &[f64]) -> Result<Vec<DefectRow>> {
    let mut rows = Vec::new();
    for &eta in etas {
        let v = if eta == 0.0 { Array1::zeros(res.dim()) } else { family.potential(eta)? };
        let op = family.operator(eta)?;
        let qs = series_terms(max_order, res, &v)?;
        for order in 0..=max_order {
            let t = truncated_series_t(eta, &qs[..=order])?;
            let p = almost_projection_p(&t)?;
            rows.push(DefectRow {
                order,
                eta,
                t_defect: t.defect,
                commutator: commutator_defect(&op, &p.projection)?,
                p_idempotency: p.projection.idempotency_defect()?,
                p_minus_t: p.distance_to_t,
                rank: p.projection.rank(),
            });
        }
    }
    Ok(rows)
}

/// `(eta, lambda_N(eta), exact lambda(eta))` for the rank-one branch.
pub fn eigenvalue_agreement(
    family: &PerturbationFamily,
    res: &ReducedResolvent,
    order: usize,
    etas: &[f64],
    exact: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    let p_lambda = Projection::onto(res.cluster_basis());
    let chi_ref = res.cluster_basis().column(0).to_owned();
    let mut out = Vec::new();
    for (&eta, &lam) in etas.iter().zip(exact) {
        let v = family.potential(eta)?;
        let qs = series_terms(order, res, &v)?;
        let p = almost_projection_p(&truncated_series_t(eta, &qs)?)?;
        let pair = effective_eigenpair(&p.projection, &family.operator(eta)?, &p_lambda, chi_ref.as_slice().expect("contiguous"))?;
        out.push((eta, pair.lambda, lam));
    }
    Ok(out)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// The default sweep `2^-3, ..., 2^-7`.
pub fn default_eta_sweep() -> Vec<f64> {
    (3..=7).map(|k| 2f64.powi(-k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{eval_confining_potential, make_model, AzimuthalProfile, TailSpec};
    use crate::operators::assemble_h;
    use crate::spectral::{all_eigenpairs, SpectralData};
    use approx::assert_abs_diff_eq;

    fn setup(tail: bool) -> (PerturbationFamily, ReducedResolvent, SpectralData) {
        let grid = Grid2D::new(6.0, 24).unwrap();
        let t = tail.then(|| TailSpec::new(4.0, 4.0, 1.0));
        let m = make_model(1.0, AzimuthalProfile::constant(1.0).unwrap(), 0.1, t, 1.0).unwrap();
        let h = assemble_h(&grid, &eval_confining_potential(&grid, &m)).unwrap();
        let sp = all_eigenpairs(&h).unwrap().group_degenerate(1e-9).unwrap();
        let res = ReducedResolvent::new(&h, &sp, 0).unwrap();
        let branch = if tail { Branch::Singular } else { Branch::Regular };
        (PerturbationFamily::new(&h, &m, 1.0, branch).unwrap(), res, sp)
    }

    #[test]
    fn compositions_count() {
        assert_eq!(compositions(3, 4).len(), 20);
        assert!(compositions(2, 3).iter().all(|c| c.iter().sum::<usize>() == 2 && c.contains(&0)));
    }

    #[test]
    fn first_terms_match_closed_forms() {
        let (fam, res, _) = setup(false);
        let v = fam.potential(0.125).unwrap();
        let qs = series_terms(2, &res, &v).unwrap();
        let p = Projection::onto(res.cluster_basis());
        assert!((&qs[0].to_dense() - &p.to_dense()).iter().all(|x| x.abs() < 1e-14));
        // Q_1 = -(S V P + P V S)
        let phi = res.cluster_basis();
        let vphi = phi * &v.view().insert_axis(Axis(1));
        let svphi = res.apply_columns(&vphi).unwrap();
        let q1 = -(svphi.dot(&phi.t()) + phi.dot(&svphi.t()));
        assert!((&qs[1].to_dense() - &q1).iter().all(|x| x.abs() < 1e-12));
        for q in &qs[1..=2] {
            assert!(q.trace().abs() < 1e-8);
        }
    }

    #[test]
    fn recursions_hold() {
        let (fam, res, _) = setup(true);
        let v = fam.potential(0.125).unwrap();
        let qs = series_terms(3, &res, &v).unwrap();
        for j in 0..=3 {
            assert!(q_recursion_residual(&qs, j).unwrap() < 1e-8);
        }
        let grid = fam.grid().clone();
        let tests = Array2::from_shape_fn((grid.dim(), 4), |(k, c)| {
            let (x, y) = grid.node(k);
            (-(x * x + y * y) / (2.0 + c as f64)).exp() * (1.0 + 0.3 * c as f64 * x)
        });
        for j in 0..3 {
            assert!(commutator_recursion_residual(&fam.h, &v, &qs, j, &tests).unwrap() < 1e-6);
        }
    }

    #[test]
    fn zero_eta_gives_the_spectral_projection() {
        let (fam, res, _) = setup(true);
        let qs = series_terms(2, &res, &fam.potential(0.1).unwrap()).unwrap();
        let t = truncated_series_t(0.0, &qs).unwrap();
        assert!(t.defect < 1e-12);
        let p = almost_projection_p(&t).unwrap();
        assert_eq!(p.projection.rank(), 1);
        assert!(commutator_defect(&fam.h, &p.projection).unwrap() < 1e-10);
        let exact = Projection::onto(res.cluster_basis());
        assert!(p.projection.distance(&exact).unwrap() < 1e-12);
    }

    #[test]
    fn large_defect_is_refused() {
        let (fam, res, _) = setup(false);
        let qs = series_terms(1, &res, &fam.potential(1.0).unwrap()).unwrap();
        let t = truncated_series_t(3.0, &qs).unwrap();
        assert!(matches!(almost_projection_p(&t), Err(Error::DefectTooLarge { .. })));
    }

    #[test]
    fn intertwiner_identity_and_too_far() {
        let a = Array2::from_shape_fn((6, 2), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let p = Projection::onto(&a);
        let u = sz_nagy_intertwiner(&p, &p).unwrap();
        assert!(u.distance_from_identity().unwrap() < 1e-14);
        let b = Array2::from_shape_fn((6, 2), |(i, j)| if i == j + 2 { 1.0 } else { 0.0 });
        assert!(matches!(sz_nagy_intertwiner(&p, &Projection::onto(&b)), Err(Error::ProjectionsTooFar { .. })));
    }

    #[test]
    fn effective_pair_at_zero_coupling() {
        let (fam, res, sp) = setup(false);
        let p = Projection::onto(res.cluster_basis());
        let chi = res.cluster_basis().column(0).to_owned();
        let pair = effective_eigenpair(&p, &fam.h, &p, chi.as_slice().unwrap()).unwrap();
        assert_abs_diff_eq!(pair.lambda, sp.eigenvalues()[0], epsilon = 1e-12);
        assert!((&pair.chi - &chi).iter().all(|x| x.abs() < 1e-14));
        let two = Projection::onto(&sp.cluster_basis(1));
        assert!(matches!(effective_eigenpair(&two, &fam.h, &p, chi.as_slice().unwrap()), Err(Error::RankMismatch { expected: 1, found: 2 })));
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let x = [0.1, 0.2, 0.4];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(2.5)).collect();
        assert_abs_diff_eq!(loglog_slope(&x, &y), 2.5, epsilon = 1e-12);
    }
}
