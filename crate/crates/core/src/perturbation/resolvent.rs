//! Reduced resolvent `S = (H - lambda)^{-1} (1 - P_lambda)` with `S P_lambda = 0`.
//!
//! Computed modes are inverted exactly. If the spectral data is incomplete,
//! the remainder is solved by projected Jacobi-preconditioned CG on the
//! orthogonal complement of every computed mode, where `H - lambda` is
//! positive as long as the target is not the top computed cluster.
//!
//! All vectors here use the Euclidean inner product.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::operators::SymOp;
use crate::spectral::SpectralData;

/// Relative residual at which the complement solve stops.
pub const CG_TOL: f64 = 1e-13;
const CG_MAX_ITER: usize = 20_000;

#[derive(Clone, Debug)]
pub struct ReducedResolvent {
    op: SymOp,
    lambda: f64,
    /// Euclidean eigenvectors of every computed mode.
    modes: Array2<f64>,
    /// `1 / (mu - lambda)` per mode, zero inside the target cluster.
    inv_gaps: Array1<f64>,
    /// Euclidean basis of the target cluster.
    cluster_basis: Array2<f64>,
    complete: bool,
    precond: Option<Array1<f64>>,
}

impl ReducedResolvent {
    /// Reduced resolvent of `op` at cluster `cluster` of `spectral`.
    pub fn new(op: &SymOp, spectral: &SpectralData, cluster: usize) -> Result<Self> {
        let cl = spectral
            .clusters()
            .get(cluster)
            .ok_or_else(|| Error::InvalidInput(format!("cluster {cluster} out of range")))?;
        let gap = spectral.gap_info(cluster)?;
        if !cl.closed || !(gap.gap > 0.0) || (!gap.upper_known && !spectral.is_complete()) {
            return Err(Error::GapTooSmall { gap: if gap.upper_known { gap.gap } else { 0.0 } });
        }
        let lambda = cl.value;
        let inv_gaps = Array1::from_shape_fn(spectral.len(), |j| {
            if cl.members.contains(&j) {
                0.0
            } else {
                1.0 / (spectral.eigenvalues()[j] - lambda)
            }
        });
        let precond = if spectral.is_complete() {
            None
        } else {
            let diag = op.diagonal();
            if diag.iter().all(|d| *d - lambda > 0.0) {
                Some(diag.mapv(|d| 1.0 / (d - lambda)))
            } else {
                Some(Array1::ones(op.dim()))
            }
        };
        Ok(ReducedResolvent {
            op: op.clone(),
            lambda,
            modes: spectral.euclidean_vectors(),
            inv_gaps,
            cluster_basis: spectral.cluster_basis(cluster),
            complete: spectral.is_complete(),
            precond,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn operator(&self) -> &SymOp {
        &self.op
    }

    /// Orthonormal basis of `ran P_lambda`.
    pub fn cluster_basis(&self) -> &Array2<f64> {
        &self.cluster_basis
    }

    /// `P_lambda v`.
    pub fn project(&self, v: ArrayView1<f64>) -> Array1<f64> {
        self.cluster_basis.dot(&self.cluster_basis.t().dot(&v))
    }

    /// `S v`.
    pub fn apply(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        let c = self.modes.t().dot(&v);
        let mut out = self.modes.dot(&(&c * &self.inv_gaps));
        if !self.complete {
            let rest = &v - &self.modes.dot(&c);
            let y = self.complement_solve(&rest)?;
            out += &y;
        }
        Ok(out)
    }

    /// `S` applied to every column.
    pub fn apply_columns(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.raw_dim());
        for (j, col) in x.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.apply(col)?);
        }
        Ok(out)
    }

    fn deflate(&self, x: &mut Array1<f64>) {
        let c = self.modes.t().dot(&*x);
        *x -= &self.modes.dot(&c);
    }

    fn shifted_apply(&self, x: &Array1<f64>) -> Array1<f64> {
        let y = Array1::from(self.op.apply_vec(x.as_slice().expect("contiguous")));
        let mut y = y - &(x * self.lambda);
        self.deflate(&mut y);
        y
    }

    fn complement_solve(&self, b: &Array1<f64>) -> Result<Array1<f64>> {
        let bnorm = b.dot(b).sqrt();
        let mut x = Array1::zeros(b.len());
        if bnorm == 0.0 {
            return Ok(x);
        }
        let m = self.precond.as_ref().expect("preconditioner for incomplete data");
        let mut r = b.clone();
        self.deflate(&mut r);
        let mut z = &r * m;
        self.deflate(&mut z);
        let mut p = z.clone();
        let mut rz = r.dot(&z);
        for it in 0..CG_MAX_ITER {
            let ap = self.shifted_apply(&p);
            let alpha = rz / p.dot(&ap);
            x.scaled_add(alpha, &p);
            r.scaled_add(-alpha, &ap);
            let rn = r.dot(&r).sqrt();
            if rn <= CG_TOL * bnorm {
                self.deflate(&mut x);
                return Ok(x);
            }
            if it % 50 == 49 {
                // refresh the recursive residual against drift
                r = b - &self.shifted_apply(&x);
                self.deflate(&mut r);
            }
            z = &r * m;
            self.deflate(&mut z);
            let rz_new = r.dot(&z);
            p = &z + &(&p * (rz_new / rz));
            rz = rz_new;
        }
        let r = b - &self.shifted_apply(&x);
        Err(Error::NoConvergence {
            what: "reduced resolvent complement solve",
            iterations: CG_MAX_ITER,
            residual: r.dot(&r).sqrt() / bnorm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{eval_confining_potential, make_model, AzimuthalProfile, Grid2D};
    use crate::operators::assemble_h;
    use crate::spectral::{all_eigenpairs, lowest_eigenpairs, EigenMethod};
    use approx::assert_abs_diff_eq;

    fn setup() -> (SymOp, SpectralData) {
        let grid = Grid2D::new(6.0, 24).unwrap();
        let m = make_model(1.0, AzimuthalProfile::constant(1.0).unwrap(), 0.1, None, 1.0).unwrap();
        let h = assemble_h(&grid, &eval_confining_potential(&grid, &m)).unwrap();
        let sp = lowest_eigenpairs(&h, 10, 1e-10, EigenMethod::Dense, 0).unwrap().group_degenerate(1e-3).unwrap();
        (h, sp)
    }

    fn probe(d: usize) -> Array1<f64> {
        Array1::from_shape_fn(d, |k| ((k as f64) * 0.37).sin() + 0.2 * ((k as f64) * 0.011).cos())
    }

    #[test]
    fn annihilates_cluster_and_inverts_other_modes() {
        let (h, sp) = setup();
        for cluster in [0, 1] {
            let s = ReducedResolvent::new(&h, &sp, cluster).unwrap();
            let own = sp.cluster_basis(cluster);
            let out = s.apply(own.column(0)).unwrap();
            assert!(out.iter().all(|v| v.abs() < 1e-10));
            let other = sp.cluster_basis(2);
            let out = s.apply(other.column(0)).unwrap();
            let expected = &other.column(0) / (sp.clusters()[2].value - s.lambda());
            assert!((&out - &expected).iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn residual_identity_and_agreement_with_full_spectrum() {
        let (h, sp) = setup();
        let full = all_eigenpairs(&h).unwrap().group_degenerate(1e-9).unwrap();
        let partial = ReducedResolvent::new(&h, &sp, 0).unwrap();
        let exact = ReducedResolvent::new(&h, &full, 0).unwrap();
        let v = probe(h.dim());
        let a = partial.apply(v.view()).unwrap();
        let b = exact.apply(v.view()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
        // (H - lambda) S v = (1 - P) v
        let hs = Array1::from(h.apply_vec(a.as_slice().unwrap())) - &(&a * partial.lambda());
        let target = &v - &partial.project(v.view());
        assert!((&hs - &target).iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn top_cluster_is_rejected() {
        let (h, sp) = setup();
        let top = sp.clusters().len() - 1;
        assert!(matches!(ReducedResolvent::new(&h, &sp, top), Err(Error::GapTooSmall { .. })));
    }
}
