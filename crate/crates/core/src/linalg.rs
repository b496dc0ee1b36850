//! Thin safe wrappers over LAPACK plus a few dense helpers: symmetric
//! eigensolves, banded factorizations, orthonormalization and low-rank
//! operators `L R^T`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::operators::SymOp;

fn check(routine: &'static str, info: i32) -> Result<()> {
    if info == 0 {
        Ok(())
    } else {
        Err(Error::Lapack { routine, info })
    }
}

/// Eigen-decomposition of a real symmetric matrix. Eigenvalues ascend and
/// column `j` of the returned matrix is the eigenvector for eigenvalue `j`.
pub fn sym_eigh(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: a.ncols(),
        });
    }
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }
    // symmetric input: row-major data is its own column-major transpose
    let mut buf: Vec<f64> = a.iter().copied().collect();
    let w = syevd(b'V', n, &mut buf)?;
    let z = Array2::from_shape_vec((n, n), buf).expect("square buffer");
    Ok((w, z.reversed_axes().as_standard_layout().to_owned()))
}

/// Eigenvalues only.
pub fn sym_eigvals(a: &Array2<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(Array1::zeros(0));
    }
    let mut buf: Vec<f64> = a.iter().copied().collect();
    syevd(b'N', n, &mut buf)
}

fn syevd(jobz: u8, n: usize, buf: &mut [f64]) -> Result<Array1<f64>> {
    let ni = n as i32;
    let mut w = vec![0.0; n];
    let mut work = vec![0.0; 1];
    let mut iwork = vec![0i32; 1];
    let mut info = 0;
    unsafe {
        lapack::dsyevd(jobz, b'L', ni, buf, ni, &mut w, &mut work, -1, &mut iwork, -1, &mut info);
    }
    check("dsyevd", info)?;
    let lwork = work[0] as usize;
    let liwork = iwork[0] as usize;
    let mut work = vec![0.0; lwork.max(1)];
    let mut iwork = vec![0i32; liwork.max(1)];
    unsafe {
        lapack::dsyevd(
            jobz,
            b'L',
            ni,
            buf,
            ni,
            &mut w,
            &mut work,
            lwork as i32,
            &mut iwork,
            liwork as i32,
            &mut info,
        );
    }
    check("dsyevd", info)?;
    Ok(Array1::from(w))
}

/// Spectral norm of a general matrix from its largest singular value.
pub fn spectral_norm(a: ArrayView2<f64>) -> Result<f64> {
    let (m, n) = a.dim();
    if m == 0 || n == 0 {
        return Ok(0.0);
    }
    // column-major copy
    let mut buf: Vec<f64> = a.t().iter().copied().collect();
    let mut sv = vec![0.0; m.min(n)];
    let mut u = [0.0];
    let mut vt = [0.0];
    let mut work = vec![0.0; 1];
    let mut info = 0;
    unsafe {
        lapack::dgesvd(b'N', b'N', m as i32, n as i32, &mut buf, m as i32, &mut sv, &mut u, 1, &mut vt, 1, &mut work, -1, &mut info);
    }
    check("dgesvd", info)?;
    let lwork = work[0] as usize;
    let mut work = vec![0.0; lwork.max(1)];
    unsafe {
        lapack::dgesvd(b'N', b'N', m as i32, n as i32, &mut buf, m as i32, &mut sv, &mut u, 1, &mut vt, 1, &mut work, lwork as i32, &mut info);
    }
    check("dgesvd", info)?;
    Ok(sv[0])
}

/// Spectral norm of a symmetric matrix from its extreme eigenvalues.
pub fn sym_norm(a: &Array2<f64>) -> Result<f64> {
    let w = sym_eigvals(a)?;
    Ok(w.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Cholesky factor of a shifted banded operator `A - sigma`.
pub struct BandedCholesky {
    n: usize,
    kd: usize,
    ab: Vec<f64>,
}

impl BandedCholesky {
    /// Fails with `SingularShift` if `A - sigma` is not positive definite.
    pub fn factor(op: &SymOp, sigma: f64) -> Result<Self> {
        let n = op.dim();
        let kd = op.bandwidth();
        let ld = kd + 1;
        let mut ab = vec![0.0; ld * n];
        op.for_each_lower(|r, c, v| {
            ab[(r - c) + c * ld] = if r == c { v - sigma } else { v };
        });
        let mut info = 0;
        unsafe {
            lapack::dpbtrf(b'L', n as i32, kd as i32, &mut ab, ld as i32, &mut info);
        }
        if info > 0 {
            return Err(Error::SingularShift {
                shift: format!("{sigma}"),
                distance: 0.0,
            });
        }
        check("dpbtrf", info)?;
        Ok(BandedCholesky { n, kd, ab })
    }

    /// Solves in place for `nrhs` right-hand sides stored column after column.
    pub fn solve_in_place(&self, b: &mut [f64], nrhs: usize) -> Result<()> {
        assert_eq!(b.len(), self.n * nrhs);
        let mut info = 0;
        unsafe {
            lapack::dpbtrs(
                b'L',
                self.n as i32,
                self.kd as i32,
                nrhs as i32,
                &self.ab,
                (self.kd + 1) as i32,
                b,
                self.n as i32,
                &mut info,
            );
        }
        check("dpbtrs", info)
    }

    /// Solves for every column of `b`.
    pub fn solve_columns(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        let nrhs = b.ncols();
        let mut buf: Vec<f64> = b.t().iter().copied().collect();
        self.solve_in_place(&mut buf, nrhs)?;
        let x = Array2::from_shape_vec((nrhs, self.n), buf).expect("shape");
        Ok(x.reversed_axes().as_standard_layout().to_owned())
    }
}

/// LU factor of `A - z` for a complex (or indefinite real) shift.
pub struct ComplexBandedLu {
    n: usize,
    kl: usize,
    ab: Vec<Complex64>,
    ipiv: Vec<i32>,
}

impl ComplexBandedLu {
    pub fn factor(op: &SymOp, z: Complex64) -> Result<Self> {
        let n = op.dim();
        let kl = op.bandwidth();
        let ld = 3 * kl + 1;
        let mut ab = vec![Complex64::new(0.0, 0.0); ld * n];
        let row = |r: usize, c: usize| 2 * kl + r - c + c * ld;
        op.for_each_lower(|r, c, v| {
            if r == c {
                ab[row(r, c)] = Complex64::new(v, 0.0) - z;
            } else {
                ab[row(r, c)] = Complex64::new(v, 0.0);
                ab[row(c, r)] = Complex64::new(v, 0.0);
            }
        });
        let mut ipiv = vec![0i32; n];
        let mut info = 0;
        unsafe {
            lapack::zgbtrf(n as i32, n as i32, kl as i32, kl as i32, &mut ab, ld as i32, &mut ipiv, &mut info);
        }
        if info > 0 {
            return Err(Error::SingularShift {
                shift: format!("{z}"),
                distance: 0.0,
            });
        }
        check("zgbtrf", info)?;
        Ok(ComplexBandedLu { n, kl, ab, ipiv })
    }

    /// Solves `(A - z) x = b` (`trans = false`) or `(A - z)^H x = b`.
    pub fn solve_in_place(&self, b: &mut [Complex64], conjugate_transpose: bool) -> Result<()> {
        assert_eq!(b.len(), self.n);
        let mut info = 0;
        let trans = if conjugate_transpose { b'C' } else { b'N' };
        unsafe {
            lapack::zgbtrs(
                trans,
                self.n as i32,
                self.kl as i32,
                self.kl as i32,
                1,
                &self.ab,
                (3 * self.kl + 1) as i32,
                &self.ipiv,
                b,
                self.n as i32,
                &mut info,
            );
        }
        check("zgbtrs", info)
    }
}

/// Euclidean dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormal basis of the column span by classical Gram–Schmidt with one
/// reorthogonalization pass. Columns whose remaining norm falls below
/// `drop_tol` times their original norm are discarded.
pub fn orthonormalize(cols: ArrayView2<f64>, drop_tol: f64) -> Array2<f64> {
    orthonormalize_against(None, cols, drop_tol)
}

/// Like [`orthonormalize`], but also orthogonal to the (orthonormal) columns of `fixed`.
pub fn orthonormalize_against(fixed: Option<ArrayView2<f64>>, cols: ArrayView2<f64>, drop_tol: f64) -> Array2<f64> {
    let d = cols.nrows();
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for col in cols.columns() {
        let orig = col.dot(&col).sqrt();
        if orig == 0.0 {
            continue;
        }
        let mut v = col.to_owned();
        let mut before = orig;
        let mut nv = orig;
        // repeat until a pass no longer removes most of the vector
        for pass in 0..4 {
            if let Some(f) = fixed {
                let c = f.t().dot(&v);
                v -= &f.dot(&c);
            }
            for b in &basis {
                let c = b.dot(&v);
                v.scaled_add(-c, b);
            }
            nv = v.dot(&v).sqrt();
            if pass >= 1 && nv > 0.5 * before {
                break;
            }
            before = nv;
        }
        if nv > drop_tol * orig {
            basis.push(v / nv);
        }
    }
    let mut out = Array2::zeros((d, basis.len()));
    for (j, b) in basis.iter().enumerate() {
        out.column_mut(j).assign(b);
    }
    out
}

/// `max |A - A^T|` entry.
pub fn asymmetry(a: &Array2<f64>) -> f64 {
    let mut m = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..i {
            m = m.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    m
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    (a + &a.t()) * 0.5
}

/// Operator `L R^T` with thin factors, kept factored on large grids.
#[derive(Clone, Debug)]
pub struct LowRank {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
}

impl LowRank {
    pub fn new(left: Array2<f64>, right: Array2<f64>) -> Self {
        assert_eq!(left.dim(), right.dim(), "factor shapes differ");
        LowRank { left, right }
    }

    pub fn zero(dim: usize) -> Self {
        LowRank::new(Array2::zeros((dim, 0)), Array2::zeros((dim, 0)))
    }

    /// Symmetric `B B^T`.
    pub fn gram(basis: &Array2<f64>) -> Self {
        LowRank::new(basis.clone(), basis.clone())
    }

    pub fn dim(&self) -> usize {
        self.left.nrows()
    }

    pub fn rank_bound(&self) -> usize {
        self.left.ncols()
    }

    pub fn scaled(&self, c: f64) -> Self {
        LowRank::new(&self.left * c, self.right.clone())
    }

    /// Sum by concatenating factors.
    pub fn add(&self, other: &LowRank) -> Self {
        LowRank::new(
            ndarray::concatenate![Axis(1), self.left, other.left],
            ndarray::concatenate![Axis(1), self.right, other.right],
        )
    }

    /// Product `self * other`.
    pub fn compose(&self, other: &LowRank) -> Self {
        let inner = self.right.t().dot(&other.left);
        LowRank::new(self.left.dot(&inner), other.right.clone())
    }

    pub fn transpose(&self) -> Self {
        LowRank::new(self.right.clone(), self.left.clone())
    }

    pub fn apply(&self, x: &[f64]) -> Array1<f64> {
        let x = ndarray::ArrayView1::from(x);
        self.left.dot(&self.right.t().dot(&x))
    }

    pub fn apply_columns(&self, x: &Array2<f64>) -> Array2<f64> {
        self.left.dot(&self.right.t().dot(x))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.left.dot(&self.right.t())
    }

    pub fn trace(&self) -> f64 {
        (&self.left * &self.right).sum()
    }

    /// Orthonormal basis `W` of the joint column span and the core `C` with
    /// `L R^T = W C W^T`.
    pub fn compress(&self) -> (Array2<f64>, Array2<f64>) {
        let w = orthonormalize(
            ndarray::concatenate![Axis(1), self.left, self.right].view(),
            1e-13,
        );
        let c = w.t().dot(&self.left).dot(&self.right.t().dot(&w));
        (w, c)
    }

    /// Spectral norm.
    pub fn norm(&self) -> Result<f64> {
        if self.rank_bound() == 0 {
            return Ok(0.0);
        }
        let (_, c) = self.compress();
        spectral_norm(c.view())
    }

    /// Spectral norm of `A B - B A` for a sparse symmetric `A` and this operator `B`.
    pub fn commutator_norm(&self, a: &SymOp) -> Result<f64> {
        let al = a.apply_columns(&self.left);
        let ar = a.apply_columns(&self.right);
        // A L R^T - L R^T A = (A L) R^T - L (A R)^T
        let comm = LowRank::new(ndarray::concatenate![Axis(1), al, -&self.left], ndarray::concatenate![Axis(1), self.right, ar]);
        comm.norm()
    }

    /// `D B - B D` for a diagonal `D`.
    pub fn diag_commutator(&self, d: &[f64]) -> LowRank {
        let dv = ndarray::ArrayView1::from(d);
        let dl = &self.left * &dv.view().insert_axis(Axis(1));
        let dr = &self.right * &dv.insert_axis(Axis(1));
        LowRank::new(ndarray::concatenate![Axis(1), dl, -&self.left], ndarray::concatenate![Axis(1), self.right, dr])
    }

    /// Keeps the first `k` columns of both factors.
    pub fn truncate(&self, k: usize) -> Self {
        LowRank::new(self.left.slice(s![.., ..k]).to_owned(), self.right.slice(s![.., ..k]).to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn eigh_small() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (w, v) = sym_eigh(&a).unwrap();
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(w[1], 3.0, epsilon = 1e-14);
        let av = a.dot(&v.column(1));
        for i in 0..2 {
            assert_abs_diff_eq!(av[i], 3.0 * v[[i, 1]], epsilon = 1e-14);
        }
    }

    #[test]
    fn eigh_reconstructs() {
        let n = 20;
        let a = Array2::from_shape_fn((n, n), |(i, j)| 1.0 / (1.0 + i as f64 + j as f64) + if i == j { i as f64 } else { 0.0 });
        let (w, v) = sym_eigh(&a).unwrap();
        let rec = v.dot(&Array2::from_diag(&w)).dot(&v.t());
        assert!((&rec - &a).iter().all(|x| x.abs() < 1e-12));
        assert!(w.windows(2).into_iter().all(|p| p[0] <= p[1]));
        assert_abs_diff_eq!(sym_norm(&a).unwrap(), w[n - 1], epsilon = 1e-12);
    }

    #[test]
    fn svd_norm_of_rotation_block() {
        let a = array![[0.0, -2.0, 0.0], [2.0, 0.0, 0.0]];
        assert_abs_diff_eq!(spectral_norm(a.view()).unwrap(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn gram_schmidt_drops_dependent_columns() {
        let a = array![[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [1.0, 2.0, 0.0]];
        let q = orthonormalize(a.view(), 1e-12);
        assert_eq!(q.ncols(), 2);
        let g = q.t().dot(&q);
        assert_abs_diff_eq!(g[[0, 1]], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[[1, 1]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn low_rank_algebra_matches_dense() {
        let l = Array2::from_shape_fn((6, 2), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let r = Array2::from_shape_fn((6, 2), |(i, j)| ((i + 2 * j) as f64).cos());
        let a = LowRank::new(l, r);
        let b = a.transpose().scaled(2.0);
        let dense = a.to_dense().dot(&b.to_dense());
        assert!((&a.compose(&b).to_dense() - &dense).iter().all(|x| x.abs() < 1e-12));
        assert_abs_diff_eq!(a.trace(), a.to_dense().diag().sum(), epsilon = 1e-12);
        assert_abs_diff_eq!(a.norm().unwrap(), spectral_norm(a.to_dense().view()).unwrap(), epsilon = 1e-12);
        let d: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let dd = Array2::from_diag(&Array1::from(d.clone()));
        let comm = dd.dot(&a.to_dense()) - a.to_dense().dot(&dd);
        assert!((&a.diag_commutator(&d).to_dense() - &comm).iter().all(|x| x.abs() < 1e-12));
    }
}
