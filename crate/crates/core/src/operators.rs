//! Finite-difference assembly of `H = -Laplace + V0` and of the fiber
//! Hamiltonians, stored matrix-free as a stencil plus a diagonal.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{
    eval_confining_potential, eval_effective_potential, eval_singular_term, Grid2D, ModelParams,
    ScalarField, Stencil,
};

/// Which fiber Hamiltonian to assemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// `H + eta p Vhat`.
    Regular,
    /// `H + eta (p Vhat + eta^(gamma-alpha-1) W)`; needs a tail.
    Singular,
}

/// Provenance of an assembled operator.
#[derive(Clone, Debug, PartialEq)]
pub enum OperatorKind {
    Unperturbed,
    Fiber { p: f64, epsilon: f64, branch: Branch },
    Custom(String),
}

/// Real symmetric operator `-Laplace_h + diag(potential)` on a [`Grid2D`].
#[derive(Clone, Debug)]
pub struct SymOp {
    grid: Grid2D,
    potential: Array1<f64>,
    kind: OperatorKind,
}

impl SymOp {
    pub fn new(grid: &Grid2D, potential: Array1<f64>, kind: OperatorKind) -> Result<Self> {
        if potential.len() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                found: potential.len(),
            });
        }
        Ok(SymOp {
            grid: grid.clone(),
            potential,
            kind,
        })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn stencil(&self) -> Stencil {
        self.grid.stencil()
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    /// Diagonal multiplication part.
    pub fn potential(&self) -> &Array1<f64> {
        &self.potential
    }

    /// Half bandwidth in flat index order.
    pub fn bandwidth(&self) -> usize {
        self.stencil().reach() * self.grid.n()
    }

    fn inv_h2(&self) -> f64 {
        1.0 / self.grid.cell_area()
    }

    fn centre(&self, i: usize) -> f64 {
        let n = self.grid.n();
        self.stencil().centre_weight(i.min(n - 1 - i))
    }

    /// Main diagonal of the matrix.
    pub fn diagonal(&self) -> Array1<f64> {
        let n = self.grid.n();
        let s = self.inv_h2();
        Array1::from_shape_fn(self.dim(), |k| {
            (self.centre(k / n) + self.centre(k % n)) * s + self.potential[k]
        })
    }

    /// Visits every stored entry `(row, col, value)` with `row >= col`.
    pub fn for_each_lower(&self, mut f: impl FnMut(usize, usize, f64)) {
        let n = self.grid.n();
        let s = self.inv_h2();
        let weights = self.stencil().neighbour_weights();
        let diag = self.diagonal();
        for k in 0..self.dim() {
            let (i, j) = (k / n, k % n);
            f(k, k, diag[k]);
            for (off, w) in weights.iter().enumerate() {
                let step = off + 1;
                if j >= step {
                    f(k, k - step, w * s);
                }
                if i >= step {
                    f(k, k - step * n, w * s);
                }
            }
        }
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.apply_generic(x, y);
    }

    pub fn apply_complex(&self, x: &[Complex64], y: &mut [Complex64]) {
        self.apply_generic(x, y);
    }

    fn apply_generic<T>(&self, x: &[T], y: &mut [T])
    where
        T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T> + Default,
    {
        let n = self.grid.n();
        let d = self.dim();
        assert_eq!(x.len(), d);
        assert_eq!(y.len(), d);
        let s = self.inv_h2();
        let weights = self.stencil().neighbour_weights();
        let centre: Vec<f64> = (0..n).map(|i| self.centre(i) * s).collect();
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                let mut acc = x[k] * (centre[i] + centre[j] + self.potential[k]);
                for (off, w) in weights.iter().enumerate() {
                    let step = off + 1;
                    let ws = w * s;
                    if j >= step {
                        acc = acc + x[k - step] * ws;
                    }
                    if j + step < n {
                        acc = acc + x[k + step] * ws;
                    }
                    if i >= step {
                        acc = acc + x[k - step * n] * ws;
                    }
                    if i + step < n {
                        acc = acc + x[k + step * n] * ws;
                    }
                }
                y[k] = acc;
            }
        }
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.apply(x, &mut y);
        y
    }

    /// Applies the operator to every column of `x`.
    pub fn apply_columns(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for (c, col) in x.columns().into_iter().enumerate() {
            let y = self.apply_vec(&col.to_vec());
            out.column_mut(c).assign(&Array1::from(y));
        }
        out
    }

    /// Dense copy, for small grids and oracle checks.
    pub fn to_dense(&self) -> Array2<f64> {
        let d = self.dim();
        let mut a = Array2::zeros((d, d));
        self.for_each_lower(|r, c, v| {
            a[[r, c]] = v;
            a[[c, r]] = v;
        });
        a
    }

    /// Same operator with `scale * field` added to the potential.
    pub fn with_added_diagonal(&self, field: &[f64], scale: f64, kind: OperatorKind) -> Result<Self> {
        if field.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: field.len(),
            });
        }
        let mut potential = self.potential.clone();
        for (v, f) in potential.iter_mut().zip(field) {
            *v += scale * f;
        }
        Ok(SymOp {
            grid: self.grid.clone(),
            potential,
            kind,
        })
    }

    /// Gershgorin bound on the spectral radius.
    pub fn norm_bound(&self) -> f64 {
        let mut rows = vec![0.0f64; self.dim()];
        self.for_each_lower(|r, c, v| {
            rows[r] += v.abs();
            if r != c {
                rows[c] += v.abs();
            }
        });
        rows.into_iter().fold(0.0, f64::max)
    }

    /// Euclidean quadratic form `<u, A u>`.
    pub fn quadratic_form(&self, u: &[f64]) -> f64 {
        let au = self.apply_vec(u);
        u.iter().zip(&au).map(|(a, b)| a * b).sum()
    }
}

/// `H = -Laplace_h + V0` with Dirichlet walls one spacing outside the grid.
pub fn assemble_h(grid: &Grid2D, confining: &ScalarField) -> Result<SymOp> {
    SymOp::new(grid, confining.values().clone(), OperatorKind::Unperturbed)
}

/// Perturbing potential `V` with `H^eta(p) = H + eta V`.
///
/// Regular branch: `V = p Vhat`. Singular branch: `V = p Vhat + eta^(gamma-alpha-1) W`.
pub fn perturbation_field(grid: &Grid2D, params: &ModelParams, p: f64, branch: Branch) -> Result<ScalarField> {
    let vhat = eval_effective_potential(grid, params, p);
    let mut v = vhat.values() * p;
    if branch == Branch::Singular {
        let tail = params.tail().ok_or(Error::TailMissing)?;
        let w = eval_singular_term(grid, params, p)?;
        let scale = params.eta().powf(tail.gamma - params.alpha() - 1.0);
        v.scaled_add(scale, w.field.values());
    }
    Ok(ScalarField::new(v))
}

/// Fiber Hamiltonian `H^eps(p)` or `H^eps_a(p)` as a diagonal update of `H`.
pub fn assemble_fiber_h(grid: &Grid2D, params: &ModelParams, p: f64, branch: Branch) -> Result<SymOp> {
    let h = assemble_h(grid, &eval_confining_potential(grid, params))?;
    let v = perturbation_field(grid, params, p, branch)?;
    h.with_added_diagonal(
        v.as_slice(),
        params.eta(),
        OperatorKind::Fiber {
            p,
            epsilon: params.epsilon(),
            branch,
        },
    )
}

/// Outcome of sampling the relative bound `|V u| <= a |u| + b |H u|`.
#[derive(Clone, Debug)]
pub struct BoundReport {
    pub samples: usize,
    pub violations: usize,
    /// Smallest `a |u| + b |H u| - |V u|` over unit vectors `u`.
    pub worst_margin: f64,
    pub a: f64,
    pub b: f64,
}

/// Random field smoothed by repeated nearest-neighbour averaging.
pub fn smooth_random_field(grid: &Grid2D, rng: &mut ChaCha8Rng, passes: usize) -> Vec<f64> {
    let n = grid.n();
    let mut u: Vec<f64> = (0..grid.dim()).map(|_| StandardNormal.sample(rng)).collect();
    let mut next = vec![0.0; u.len()];
    for _ in 0..passes {
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                let mut acc = 4.0 * u[k];
                if i > 0 {
                    acc += u[k - n];
                }
                if i + 1 < n {
                    acc += u[k + n];
                }
                if j > 0 {
                    acc += u[k - 1];
                }
                if j + 1 < n {
                    acc += u[k + 1];
                }
                next[k] = acc / 8.0;
            }
        }
        std::mem::swap(&mut u, &mut next);
    }
    u
}

fn euclid(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Checks `|Vhat u| <= (sqrt 2 + eta |p|) |u| + sqrt 2 |H u|` on `extra` vectors
/// and on `samples` smoothed random fields drawn from `seed`.
pub fn h_bound_check(
    h: &SymOp,
    vhat: &ScalarField,
    eta_p: f64,
    samples: usize,
    extra: &[Vec<f64>],
    seed: u64,
) -> Result<BoundReport> {
    if vhat.len() != h.dim() {
        return Err(Error::DimensionMismatch {
            expected: h.dim(),
            found: vhat.len(),
        });
    }
    let a = 2f64.sqrt() + eta_p.abs();
    let b = 2f64.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    let mut check = |u: &[f64]| {
        let norm = euclid(u);
        let (lhs, rhs) = if norm == 0.0 {
            (0.0, 0.0)
        } else {
            let vu: Vec<f64> = u.iter().zip(vhat.as_slice()).map(|(x, v)| x * v / norm).collect();
            let hu: Vec<f64> = h.apply_vec(u).iter().map(|x| x / norm).collect();
            (euclid(&vu), a + b * euclid(&hu))
        };
        let margin = rhs - lhs;
        if margin < 0.0 {
            violations += 1;
        }
        worst = worst.min(margin);
    };
    for u in extra {
        check(u);
    }
    for s in 0..samples {
        let u = smooth_random_field(h.grid(), &mut rng, 1 + s % 8);
        check(&u);
    }
    Ok(BoundReport {
        samples: samples + extra.len(),
        violations,
        worst_margin: worst,
        a,
        b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_model, AzimuthalProfile, TailSpec};
    use approx::assert_abs_diff_eq;

    fn harmonic(eps: f64) -> ModelParams {
        make_model(1.0, AzimuthalProfile::constant(1.0).unwrap(), eps, None, 1.5).unwrap()
    }

    #[test]
    fn five_point_weights() {
        let grid = Grid2D::new(1.0, 16).unwrap().with_stencil(Stencil::FivePoint);
        let zero = ScalarField::new(Array1::zeros(grid.dim()));
        let a = assemble_h(&grid, &zero).unwrap().to_dense();
        let h2 = grid.cell_area();
        let n = grid.n();
        let k = 5 * n + 7;
        assert_abs_diff_eq!(a[[k, k]] * h2, 4.0, epsilon = 1e-12);
        for nb in [k - 1, k + 1, k - n, k + n] {
            assert_abs_diff_eq!(a[[k, nb]] * h2, -1.0, epsilon = 1e-12);
        }
        let row_sum: f64 = a.row(k).sum();
        assert_abs_diff_eq!(row_sum, 0.0, epsilon = 1e-9);
        // corner rows lose two neighbours to the wall
        assert_abs_diff_eq!(a.row(0).sum() * h2, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn fourth_order_weights() {
        let grid = Grid2D::new(1.0, 16).unwrap();
        let zero = ScalarField::new(Array1::zeros(grid.dim()));
        let a = assemble_h(&grid, &zero).unwrap().to_dense();
        let h2 = grid.cell_area();
        let n = grid.n();
        let k = 6 * n + 6;
        assert_abs_diff_eq!(a[[k, k]] * h2, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[[k, k + 1]] * h2, -4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[[k, k + 2 * n]] * h2, 1.0 / 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.row(k).sum(), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a[[0, 0]] * h2, 5.0 - 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn dense_matches_matvec_and_is_symmetric() {
        let grid = Grid2D::new(3.0, 16).unwrap();
        let m = harmonic(0.3);
        let h = assemble_fiber_h(&grid, &m, 0.7, Branch::Regular).unwrap();
        let a = h.to_dense();
        assert_eq!((&a - &a.t()).iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
        let x: Vec<f64> = (0..grid.dim()).map(|k| ((k * 37 % 11) as f64).sin()).collect();
        let y = h.apply_vec(&x);
        let y2 = a.dot(&Array1::from(x));
        for (u, v) in y.iter().zip(y2.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-10);
        }
        assert!(h.norm_bound() >= a.diag().iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn fiber_reduces_to_h_at_zero_momentum() {
        let grid = Grid2D::new(4.0, 16).unwrap();
        let m = harmonic(0.25);
        let h = assemble_h(&grid, &eval_confining_potential(&grid, &m)).unwrap();
        let f = assemble_fiber_h(&grid, &m, 0.0, Branch::Regular).unwrap();
        assert_eq!(h.to_dense(), f.to_dense());
    }

    #[test]
    fn fiber_converges_to_h_as_epsilon_vanishes() {
        let grid = Grid2D::new(4.0, 16).unwrap();
        let h = assemble_h(&grid, &eval_confining_potential(&grid, &harmonic(1.0))).unwrap();
        let mut last = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-8, 1e-12, 1e-16] {
            let f = assemble_fiber_h(&grid, &harmonic(eps), 1.0, Branch::Regular).unwrap();
            let diff = (f.potential() - h.potential()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < last);
            last = diff;
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn fiber_diagonal_shift_value() {
        let grid = Grid2D::new(8.0, 17).unwrap();
        let m = harmonic(0.25);
        let h = assemble_h(&grid, &eval_confining_potential(&grid, &m)).unwrap();
        let f = assemble_fiber_h(&grid, &m, 1.0, Branch::Regular).unwrap();
        let k = 9 * 17 + 8; // x = (1, 0)
        assert_eq!(grid.node(k), (1.0, 0.0));
        assert_abs_diff_eq!(f.potential()[k] - h.potential()[k], 1.25, epsilon = 1e-14);
    }

    #[test]
    fn singular_branch_needs_tail() {
        let grid = Grid2D::new(4.0, 16).unwrap();
        assert!(matches!(
            assemble_fiber_h(&grid, &harmonic(0.25), 1.0, Branch::Singular),
            Err(Error::TailMissing)
        ));
        let m = make_model(1.0, AzimuthalProfile::constant(1.0).unwrap(), 0.25, Some(TailSpec::new(4.0, 4.0, 1.0)), 1.0).unwrap();
        let reg = assemble_fiber_h(&grid, &m, 1.0, Branch::Regular).unwrap();
        let sing = assemble_fiber_h(&grid, &m, 1.0, Branch::Singular).unwrap();
        // the tail only adds to the diagonal and keeps the operator nonnegative
        assert!((sing.potential() - reg.potential()).iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn wrong_field_length_rejected() {
        let grid = Grid2D::new(4.0, 16).unwrap();
        let field = ScalarField::new(Array1::zeros(10));
        assert!(matches!(assemble_h(&grid, &field), Err(Error::DimensionMismatch { expected: 256, found: 10 })));
    }

    #[test]
    fn quadratic_form_nonnegative() {
        let grid = Grid2D::new(5.0, 24).unwrap();
        let m = harmonic(0.1);
        for stencil in [Stencil::FivePoint, Stencil::FourthOrder] {
            let g = grid.clone().with_stencil(stencil);
            let h = assemble_h(&g, &eval_confining_potential(&g, &m)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for s in 0..100 {
                // raw white noise (no smoothing) probes the high-frequency end too
                let u = smooth_random_field(&g, &mut rng, s % 3);
                assert!(h.quadratic_form(&u) >= 0.0);
            }
        }
    }

    #[test]
    fn bound_check_zero_vector_and_samples() {
        let grid = Grid2D::new(6.0, 32).unwrap();
        let m = harmonic(0.25);
        let h = assemble_h(&grid, &eval_confining_potential(&grid, &m)).unwrap();
        let vhat = eval_effective_potential(&grid, &m, 2.0);
        let report = h_bound_check(&h, &vhat, m.eta() * 2.0, 50, &[vec![0.0; grid.dim()]], 3).unwrap();
        assert_eq!(report.violations, 0);
        assert_eq!(report.samples, 51);
        assert_eq!(report.worst_margin, 0.0);
    }
}
