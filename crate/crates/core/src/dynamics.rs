//! Fibered time evolution `i eps^(2 beta) d/dt psi(p) = H^eps(p) psi(p)`, the
//! effective drift-dispersion solution, synthesis back to `z`, and the error
//! studies comparing the two.
//!
//! Fiber states are stored with the grid inner product, so a fiber norm is
//! `sqrt(h^2 sum |psi|^2)` and the total norm is `sqrt(dp sum_m |psi_m|^2)`.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::linalg::sym_eigh;
use crate::model::{Grid2D, ModelParams};
use crate::operators::{assemble_fiber_h, Branch, SymOp};
use crate::perturbation::{coupling_matrix, rs_coefficients, ReducedResolvent};
use crate::spectral::SpectralData;

type CVec = Array1<Complex64>;

/// Periodic `z` grid on `[-Z, Z)` and its dual momenta `p_m = pi m / Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZGrid {
    half_length: f64,
    nz: usize,
}

impl ZGrid {
    pub fn new(half_length: f64, nz: usize) -> Result<Self> {
        if !(half_length > 0.0) || !half_length.is_finite() {
            return Err(Error::InvalidInput(format!("Z must be positive, got {half_length}")));
        }
        if nz < 2 || !nz.is_power_of_two() {
            return Err(Error::InvalidInput(format!("n_z must be a power of two >= 2, got {nz}")));
        }
        Ok(ZGrid { half_length, nz })
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn len(&self) -> usize {
        self.nz
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dz(&self) -> f64 {
        2.0 * self.half_length / self.nz as f64
    }

    pub fn dp(&self) -> f64 {
        std::f64::consts::PI / self.half_length
    }

    /// Integer label `m` of slot `i`, running over `[-nz/2, nz/2)`.
    pub fn mode(&self, i: usize) -> i64 {
        i as i64 - (self.nz / 2) as i64
    }

    pub fn p(&self, i: usize) -> f64 {
        self.mode(i) as f64 * self.dp()
    }

    pub fn p_values(&self) -> Vec<f64> {
        (0..self.nz).map(|i| self.p(i)).collect()
    }

    pub fn z(&self, j: usize) -> f64 {
        -self.half_length + j as f64 * self.dz()
    }

    pub fn z_values(&self) -> Vec<f64> {
        (0..self.nz).map(|j| self.z(j)).collect()
    }

    pub fn p_range(&self) -> (f64, f64) {
        (self.p(0), self.p(self.nz - 1))
    }
}

/// Smooth compactly supported momentum amplitude `a(p) ~ exp(-1/(1-s^2))`,
/// `s = (p - center)/half_width`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmplitudeSpec {
    pub center: f64,
    pub half_width: f64,
}

impl Default for AmplitudeSpec {
    fn default() -> Self {
        AmplitudeSpec {
            center: 1.0,
            half_width: 0.5,
        }
    }
}

fn bump(s: f64) -> f64 {
    if s.abs() < 1.0 {
        (-1.0 / (1.0 - s * s)).exp()
    } else {
        0.0
    }
}

impl AmplitudeSpec {
    pub fn new(center: f64, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0) || !center.is_finite() || !half_width.is_finite() {
            return Err(Error::InvalidInput(format!("bad amplitude center {center}, half-width {half_width}")));
        }
        Ok(AmplitudeSpec { center, half_width })
    }

    /// Largest `|p|` in the support.
    pub fn p0(&self) -> f64 {
        self.center.abs() + self.half_width
    }

    /// `a(p_m)` normalized to `dp sum |a|^2 = 1`.
    pub fn sample(&self, zgrid: &ZGrid) -> Result<Vec<f64>> {
        let (lo, hi) = zgrid.p_range();
        let (slo, shi) = (self.center - self.half_width, self.center + self.half_width);
        if slo < lo || shi > hi {
            return Err(Error::SupportExceedsGrid {
                lo: slo,
                hi: shi,
                grid_lo: lo,
                grid_hi: hi,
            });
        }
        let mut a: Vec<f64> = zgrid.p_values().iter().map(|p| bump((p - self.center) / self.half_width)).collect();
        let mass: f64 = zgrid.dp() * a.iter().map(|v| v * v).sum::<f64>();
        if mass == 0.0 {
            return Err(Error::InvalidInput("amplitude support contains no grid momentum".into()));
        }
        let c = mass.sqrt().recip();
        a.iter_mut().for_each(|v| *v *= c);
        Ok(a)
    }
}

/// Fibered wave function `psi(x, p_m)`; inactive fibers are identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FiberState {
    pub zgrid: ZGrid,
    pub grid: Grid2D,
    pub time: f64,
    pub epsilon: f64,
    pub fibers: Vec<Option<CVec>>,
}

impl FiberState {
    pub fn zero(zgrid: &ZGrid, grid: &Grid2D, epsilon: f64) -> Self {
        FiberState {
            zgrid: zgrid.clone(),
            grid: grid.clone(),
            time: 0.0,
            epsilon,
            fibers: vec![None; zgrid.len()],
        }
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.fibers.len()).filter(|i| self.fibers[*i].is_some()).collect()
    }

    /// Grid norm of fiber `i`.
    pub fn fiber_norm(&self, i: usize) -> f64 {
        self.fibers[i]
            .as_ref()
            .map(|f| (self.grid.cell_area() * f.iter().map(|c| c.norm_sqr()).sum::<f64>()).sqrt())
            .unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        let s: f64 = (0..self.fibers.len()).map(|i| self.fiber_norm(i).powi(2)).sum();
        (self.zgrid.dp() * s).sqrt()
    }

    /// `sqrt(dp sum_m |a_m - b_m|^2)`.
    pub fn distance(&self, other: &FiberState) -> Result<f64> {
        if self.fibers.len() != other.fibers.len() || self.grid.dim() != other.grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.fibers.len() * self.grid.dim(),
                found: other.fibers.len() * other.grid.dim(),
            });
        }
        let mut s = 0.0;
        for (a, b) in self.fibers.iter().zip(&other.fibers) {
            s += match (a, b) {
                (None, None) => 0.0,
                (Some(x), None) | (None, Some(x)) => x.iter().map(|c| c.norm_sqr()).sum(),
                (Some(x), Some(y)) => x.iter().zip(y).map(|(u, v)| (u - v).norm_sqr()).sum(),
            };
        }
        Ok((self.zgrid.dp() * self.grid.cell_area() * s).sqrt())
    }

    /// Fiberwise sum; fibers absent in both stay inactive.
    pub fn add(&self, other: &FiberState) -> Result<FiberState> {
        if self.fibers.len() != other.fibers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.fibers.len(),
                found: other.fibers.len(),
            });
        }
        let fibers = self
            .fibers
            .iter()
            .zip(&other.fibers)
            .map(|(a, b)| match (a, b) {
                (None, None) => None,
                (Some(x), None) | (None, Some(x)) => Some(x.clone()),
                (Some(x), Some(y)) => Some(x + y),
            })
            .collect();
        Ok(FiberState {
            fibers,
            ..self.clone()
        })
    }
}

/// `psi_0(x, p_m) = a(p_m) chi(x)` for a grid-normalized `chi`.
pub fn build_initial_fibered(amp: &[f64], chi: &[f64], zgrid: &ZGrid, grid: &Grid2D, epsilon: f64) -> Result<FiberState> {
    if amp.len() != zgrid.len() {
        return Err(Error::DimensionMismatch {
            expected: zgrid.len(),
            found: amp.len(),
        });
    }
    if chi.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            found: chi.len(),
        });
    }
    let mut state = FiberState::zero(zgrid, grid, epsilon);
    for (slot, &a) in state.fibers.iter_mut().zip(amp) {
        if a != 0.0 {
            *slot = Some(chi.iter().map(|&c| Complex64::new(a * c, 0.0)).collect());
        }
    }
    Ok(state)
}

/// How each fiber exponential is evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Propagator {
    /// Dense for `n <= 64`, Krylov above.
    Auto,
    /// Full eigendecomposition of every active fiber.
    Dense,
    /// Lanczos exponential with per-step error control.
    Krylov { tol: f64, subspace: usize },
}

pub const KRYLOV_TOL: f64 = 1e-9;
pub const KRYLOV_SUBSPACE: usize = 36;
const KRYLOV_MAX_STEPS: usize = 100_000;

impl Propagator {
    fn resolve(self, grid: &Grid2D) -> Propagator {
        match self {
            Propagator::Auto if grid.n() <= 64 => Propagator::Dense,
            Propagator::Auto => Propagator::Krylov {
                tol: KRYLOV_TOL,
                subspace: KRYLOV_SUBSPACE,
            },
            p => p,
        }
    }
}

fn real_dot_t(x: &Array2<f64>, v: &CVec) -> CVec {
    let re = x.t().dot(&v.mapv(|c| c.re));
    let im = x.t().dot(&v.mapv(|c| c.im));
    re.iter().zip(&im).map(|(a, b)| Complex64::new(*a, *b)).collect()
}

fn real_dot(x: &Array2<f64>, c: &CVec) -> CVec {
    let re = x.dot(&c.mapv(|v| v.re));
    let im = x.dot(&c.mapv(|v| v.im));
    re.iter().zip(&im).map(|(a, b)| Complex64::new(*a, *b)).collect()
}

fn cnorm(v: &CVec) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

fn cdot(a: &CVec, b: &CVec) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// `exp(-i tau A) v` by restarted Lanczos with the a-posteriori estimate
/// `beta_m |e_m^T exp(-i dt T) e_1| |w|` kept below `tol` on every step.
pub fn krylov_expm(op: &SymOp, v: &CVec, tau: f64, tol: f64, subspace: usize) -> Result<CVec> {
    let mut w = v.clone();
    if tau == 0.0 || cnorm(&w) == 0.0 {
        return Ok(w);
    }
    let d = op.dim();
    let m_max = subspace.clamp(2, d);
    let anorm = op.norm_bound().max(1e-300);
    let total = tau.abs();
    let sign = tau.signum();
    let mut done = 0.0;
    let mut step = (m_max as f64 / anorm).min(total);
    let mut steps = 0;
    while done < total {
        steps += 1;
        if steps > KRYLOV_MAX_STEPS {
            return Err(Error::NoConvergence {
                what: "Krylov exponential",
                iterations: KRYLOV_MAX_STEPS,
                residual: total - done,
            });
        }
        let beta0 = cnorm(&w);
        let mut basis: Vec<CVec> = vec![&w / Complex64::new(beta0, 0.0)];
        let mut alpha = Vec::with_capacity(m_max);
        let mut beta = Vec::with_capacity(m_max);
        let mut happy = false;
        let mut av = vec![Complex64::new(0.0, 0.0); d];
        for j in 0..m_max {
            op.apply_complex(basis[j].as_slice().expect("contiguous"), &mut av);
            let mut u = CVec::from(av.clone());
            // full reorthogonalization, twice
            for _ in 0..2 {
                for q in &basis {
                    let c = cdot(q, &u);
                    u.scaled_add(-c, q);
                }
            }
            alpha.push(cdot(&basis[j], &CVec::from(av.clone())).re);
            let b = cnorm(&u);
            beta.push(b);
            if b <= 1e-12 * anorm {
                happy = true;
                break;
            }
            basis.push(u / Complex64::new(b, 0.0));
        }
        let m = alpha.len();
        let mut t = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            t[[i, i]] = alpha[i];
            if i + 1 < m {
                t[[i, i + 1]] = beta[i];
                t[[i + 1, i]] = beta[i];
            }
        }
        let (theta, z) = sym_eigh(&t)?;
        let small_exp = |dt: f64| -> CVec {
            (0..m)
                .map(|r| {
                    (0..m)
                        .map(|k| z[[r, k]] * z[[0, k]] * Complex64::from_polar(1.0, -sign * dt * theta[k]))
                        .sum()
                })
                .collect()
        };
        let beta_m = beta[m - 1];
        loop {
            let dt = step.min(total - done);
            let y = small_exp(dt);
            let err = if happy { 0.0 } else { beta0 * beta_m * y[m - 1].norm() };
            if err <= tol {
                let mut out = CVec::zeros(d);
                for (k, q) in basis.iter().take(m).enumerate() {
                    out.scaled_add(y[k] * beta0, q);
                }
                w = out;
                done += dt;
                let grow = if err > 0.0 { 0.9 * (tol / err).powf(1.0 / m as f64) } else { 2.0 };
                step = dt * grow.clamp(0.2, 2.0);
                if dt < step && done >= total {
                    break;
                }
                break;
            }
            step = dt * (0.9 * (tol / err).powf(1.0 / m as f64)).clamp(0.1, 0.5);
        }
    }
    Ok(w)
}

fn fiber_momenta(state: &FiberState) -> Vec<(usize, f64)> {
    state.active().into_iter().map(|i| (i, state.zgrid.p(i))).collect()
}

/// `exp(-i t eps^(-2 beta) H^eps(p))` applied to every active fiber, for each
/// requested time. Fibers run in parallel and are gathered in `p` order.
pub fn propagate_times(
    params: &ModelParams,
    branch: Branch,
    state: &FiberState,
    times: &[f64],
    method: Propagator,
) -> Result<Vec<FiberState>> {
    let params = params.with_epsilon(state.epsilon)?;
    let grid = state.grid.clone();
    let method = method.resolve(&grid);
    let scale = params.eta().powi(-2);
    let work = fiber_momenta(state);
    let evolved: Vec<Result<Vec<CVec>>> = work
        .par_iter()
        .map(|&(i, p)| {
            let psi0 = state.fibers[i].as_ref().expect("active fiber");
            let op = assemble_fiber_h(&grid, &params, p, branch)?;
            match method {
                Propagator::Dense | Propagator::Auto => {
                    let (lam, x) = sym_eigh(&op.to_dense())?;
                    let c0 = real_dot_t(&x, psi0);
                    Ok(times
                        .iter()
                        .map(|&t| {
                            let tau = t * scale;
                            let c: CVec = c0.iter().zip(&lam).map(|(c, l)| c * Complex64::from_polar(1.0, -tau * l)).collect();
                            real_dot(&x, &c)
                        })
                        .collect())
                }
                Propagator::Krylov { tol, subspace } => {
                    let mut order: Vec<usize> = (0..times.len()).collect();
                    order.sort_by(|a, b| times[*a].total_cmp(&times[*b]));
                    let mut out = vec![CVec::zeros(0); times.len()];
                    // positive and negative times both start from t = 0
                    let (mut cur_t, mut cur) = (0.0, psi0.clone());
                    for &k in order.iter().filter(|k| times[**k] >= 0.0) {
                        cur = krylov_expm(&op, &cur, (times[k] - cur_t) * scale, tol, subspace)?;
                        cur_t = times[k];
                        out[k] = cur.clone();
                    }
                    let (mut cur_t, mut cur) = (0.0, psi0.clone());
                    for &k in order.iter().rev().filter(|k| times[**k] < 0.0) {
                        cur = krylov_expm(&op, &cur, (times[k] - cur_t) * scale, tol, subspace)?;
                        cur_t = times[k];
                        out[k] = cur.clone();
                    }
                    Ok(out)
                }
            }
        })
        .collect();
    let mut results: Vec<FiberState> = times
        .iter()
        .map(|&t| FiberState {
            time: state.time + t,
            ..state.clone()
        })
        .collect();
    for ((i, _), ev) in work.iter().zip(evolved) {
        for (k, v) in ev?.into_iter().enumerate() {
            results[k].fibers[*i] = Some(v);
        }
    }
    Ok(results)
}

/// Single-time variant of [`propagate_times`].
pub fn propagate_fiber(params: &ModelParams, branch: Branch, state: &FiberState, t: f64, method: Propagator) -> Result<FiberState> {
    Ok(propagate_times(params, branch, state, &[t], method)?.remove(0))
}

/// Coefficients entering the effective solution.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveParams {
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl EffectiveParams {
    /// `eps^(-beta) lambda_1`.
    pub fn drift_velocity(&self, params: &ModelParams) -> f64 {
        params.eta().recip() * self.lambda1
    }

    /// `1 / lambda_2`.
    pub fn effective_mass(&self) -> f64 {
        self.lambda2.recip()
    }
}

/// Effective mode: a grid-normalized eigenvector and its coefficients.
#[derive(Clone, Debug)]
pub struct EffectiveMode {
    pub cluster: usize,
    pub member: usize,
    pub chi: Array1<f64>,
    pub eff: EffectiveParams,
}

/// Rayleigh–Schrödinger coefficients of `(cluster, member)` with the exact
/// second-order remainder.
pub fn effective_mode(h: &SymOp, params: &ModelParams, spectral: &SpectralData, cluster: usize, member: usize) -> Result<EffectiveMode> {
    let coupling = coupling_matrix(spectral, params);
    let res = ReducedResolvent::new(h, spectral, cluster)?;
    let rs = rs_coefficients(&coupling, spectral, cluster, Some(&res))?;
    if member >= rs.lambda1.len() {
        return Err(Error::InvalidInput(format!(
            "member {member} out of range for a cluster of multiplicity {}",
            rs.lambda1.len()
        )));
    }
    Ok(EffectiveMode {
        cluster,
        member,
        chi: rs.basis.column(member).to_owned(),
        eff: EffectiveParams {
            lambda: rs.lambda,
            lambda1: rs.lambda1[member],
            lambda2: rs.lambda2[member],
        },
    })
}

/// `phi(t, x, p) = exp(-i t (eps^(-2 beta) lambda + eps^(-beta) p lambda_1 + p^2 lambda_2)) a(p) chi(x)`.
pub fn effective_solution_fibered(
    t: f64,
    eff: &EffectiveParams,
    amp: &[Complex64],
    chi: &[f64],
    zgrid: &ZGrid,
    grid: &Grid2D,
    params: &ModelParams,
) -> Result<FiberState> {
    if amp.len() != zgrid.len() || chi.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: zgrid.len(),
            found: amp.len(),
        });
    }
    let eta = params.eta();
    let mut state = FiberState::zero(zgrid, grid, params.epsilon());
    state.time = t;
    for (i, slot) in state.fibers.iter_mut().enumerate() {
        if amp[i] == Complex64::new(0.0, 0.0) {
            continue;
        }
        let p = zgrid.p(i);
        let phase = -t * (eff.lambda / (eta * eta) + p * eff.lambda1 / eta + p * p * eff.lambda2);
        let c = amp[i] * Complex64::from_polar(1.0, phase);
        *slot = Some(chi.iter().map(|&x| c * x).collect());
    }
    Ok(state)
}

/// Field on `(x node, z_j)`.
#[derive(Clone, Debug)]
pub struct SynthesizedField {
    pub grid: Grid2D,
    pub zgrid: ZGrid,
    /// Shape `(grid.dim(), nz)`.
    pub values: Array2<Complex64>,
}

impl SynthesizedField {
    /// `h^2 sum_x |phi(x, z_j)|^2` for every `z_j`.
    pub fn envelope(&self) -> Vec<f64> {
        let area = self.grid.cell_area();
        self.values
            .columns()
            .into_iter()
            .map(|c| area * c.iter().map(|v| v.norm_sqr()).sum::<f64>())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        (self.zgrid.dz() * self.envelope().iter().sum::<f64>()).sqrt()
    }

    /// `z` of the envelope maximum.
    pub fn peak(&self) -> f64 {
        let env = self.envelope();
        let j = (0..env.len()).max_by(|a, b| env[*a].total_cmp(&env[*b])).unwrap_or(0);
        self.zgrid.z(j)
    }
}

/// `phi(x, z_j) = dp / sqrt(2 pi) sum_m phi(x, p_m) exp(i p_m z_j)`.
pub fn synthesize(state: &FiberState) -> SynthesizedField {
    let zg = &state.zgrid;
    let nz = zg.len();
    let d = state.grid.dim();
    let fft = FftPlanner::<f64>::new().plan_fft_inverse(nz);
    let scale = zg.dp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut values = Array2::<Complex64>::zeros((d, nz));
    let active = state.active();
    let mut buf = vec![Complex64::new(0.0, 0.0); nz];
    for x in 0..d {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for &i in &active {
            let m = zg.mode(i);
            let slot = m.rem_euclid(nz as i64) as usize;
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            buf[slot] = state.fibers[i].as_ref().expect("active")[x] * sign;
        }
        fft.process(&mut buf);
        for (j, b) in buf.iter().enumerate() {
            values[[x, j]] = b * scale;
        }
    }
    SynthesizedField {
        grid: state.grid.clone(),
        zgrid: zg.clone(),
        values,
    }
}

/// Error table `E(eps, t)` with log-log slopes in `eps` and growth in `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceTable {
    pub eps: Vec<f64>,
    pub times: Vec<f64>,
    /// `errors[e][k] = E(eps[e], times[k])`.
    pub errors: Vec<Vec<f64>>,
    /// Fitted slope of `log E` against `log eps` at each time.
    pub slopes: Vec<f64>,
    /// Largest fiber-norm drift of the exact propagation.
    pub unitarity_defect: f64,
    pub mode: EffectiveParams,
}

impl ConvergenceTable {
    pub fn error(&self, eps: usize, t: usize) -> f64 {
        self.errors[eps][t]
    }

    /// `E(eps, 2t) / E(eps, t)` for every pair of tabulated times in ratio two.
    pub fn doubling_ratios(&self) -> Vec<(f64, f64, f64, f64)> {
        let mut out = Vec::new();
        for (e, &eps) in self.eps.iter().enumerate() {
            for (a, &ta) in self.times.iter().enumerate() {
                for (b, &tb) in self.times.iter().enumerate() {
                    if ta > 0.0 && (tb - 2.0 * ta).abs() < 1e-12 {
                        out.push((eps, ta, self.errors[e][a], self.errors[e][b]));
                    }
                }
            }
        }
        out
    }
}

/// Errors at or below this level are treated as zero when fitting slopes.
pub const ROUNDOFF_ERROR: f64 = 1e-12;

/// Everything an error study needs besides the model.
#[derive(Clone, Debug)]
pub struct StudySetup {
    pub zgrid: ZGrid,
    pub amplitude: AmplitudeSpec,
    pub propagator: Propagator,
}

impl Default for StudySetup {
    fn default() -> Self {
        StudySetup {
            zgrid: ZGrid::new(32.0, 256).expect("valid default"),
            amplitude: AmplitudeSpec::default(),
            propagator: Propagator::Dense,
        }
    }
}

/// `E(eps, t) = |psi(t) - phi(t)|` in fiber space for every pair.
pub fn error_study(
    params: &ModelParams,
    branch: Branch,
    mode: &EffectiveMode,
    setup: &StudySetup,
    grid: &Grid2D,
    times: &[f64],
    eps_list: &[f64],
) -> Result<ConvergenceTable> {
    if eps_list.is_empty() || times.is_empty() {
        return Err(Error::InvalidInput("error study needs at least one eps and one t".into()));
    }
    if let Some(e) = eps_list.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
        return Err(Error::InvalidInput(format!("eps must lie in (0, 1], got {e}")));
    }
    let amp = setup.amplitude.sample(&setup.zgrid)?;
    let camp: Vec<Complex64> = amp.iter().map(|a| Complex64::new(*a, 0.0)).collect();
    let chi = mode.chi.as_slice().expect("contiguous");
    let mut errors = Vec::with_capacity(eps_list.len());
    let mut unitarity = 0.0f64;
    for &eps in eps_list {
        let pe = params.with_epsilon(eps)?;
        let init = build_initial_fibered(&amp, chi, &setup.zgrid, grid, eps)?;
        let exact = propagate_times(&pe, branch, &init, times, setup.propagator)?;
        let mut row = Vec::with_capacity(times.len());
        for (state, &t) in exact.iter().zip(times) {
            for i in init.active() {
                unitarity = unitarity.max((state.fiber_norm(i) - init.fiber_norm(i)).abs());
            }
            let eff = effective_solution_fibered(t, &mode.eff, &camp, chi, &setup.zgrid, grid, &pe)?;
            row.push(state.distance(&eff)?);
        }
        errors.push(row);
    }
    let slopes = (0..times.len())
        .map(|k| {
            let e: Vec<f64> = errors.iter().map(|r| r[k]).collect();
            if eps_list.len() < 2 || e.iter().any(|v| *v <= ROUNDOFF_ERROR) {
                f64::NAN
            } else {
                crate::perturbation::loglog_slope(eps_list, &e)
            }
        })
        .collect();
    Ok(ConvergenceTable {
        eps: eps_list.to_vec(),
        times: times.to_vec(),
        errors,
        slopes,
        unitarity_defect: unitarity,
        mode: mode.eff.clone(),
    })
}

/// One component `a_k^n(p) chi_k^n(x)` of a general initial state.
#[derive(Clone, Debug)]
pub struct ExpansionTerm {
    pub mode: EffectiveMode,
    /// Samples on the `p` grid.
    pub amplitude: Vec<Complex64>,
}

impl ExpansionTerm {
    pub fn mass(&self, zgrid: &ZGrid) -> f64 {
        zgrid.dp() * self.amplitude.iter().map(|a| a.norm_sqr()).sum::<f64>()
    }
}

/// Bookkeeping of the cluster truncation and the momentum cutoffs.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralReport {
    /// Clusters kept, ascending.
    pub kept_clusters: Vec<usize>,
    /// `1 - sum over kept terms of |a_k^n|^2`.
    pub tail_mass: f64,
    /// `|a - b|` for each kept term, in input order of kept terms.
    pub cutoff_errors: Vec<f64>,
    /// Momentum cutoff `P` with `b = a 1{|p| <= P}` for each kept term.
    pub cutoffs: Vec<f64>,
    /// `sqrt(tail_mass) + sum cutoff_errors`.
    pub error_budget: f64,
}

/// Sum of effective solutions over the fewest clusters whose discarded mass
/// is at most `delta`, each amplitude cut to a compact momentum window.
pub fn evolve_general(
    terms: &[ExpansionTerm],
    delta: f64,
    params: &ModelParams,
    zgrid: &ZGrid,
    grid: &Grid2D,
    t: f64,
) -> Result<(FiberState, GeneralReport)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("delta must be positive, got {delta}")));
    }
    let mut clusters: Vec<usize> = terms.iter().map(|x| x.mode.cluster).collect();
    clusters.sort_unstable();
    clusters.dedup();
    let mut kept = Vec::new();
    let mut tail = 1.0;
    for &c in &clusters {
        kept.push(c);
        tail = 1.0 - tail_sum(terms, &kept, zgrid);
        if tail <= delta {
            break;
        }
    }
    if clusters.is_empty() || tail > delta {
        return Err(Error::ExpansionIncomplete { tail_norm: tail, delta });
    }
    let selected: Vec<&ExpansionTerm> = terms.iter().filter(|x| kept.contains(&x.mode.cluster)).collect();
    let delta1 = delta / selected.len() as f64;
    let mut state = FiberState::zero(zgrid, grid, params.epsilon());
    state.time = t;
    let mut cutoff_errors = Vec::new();
    let mut cutoffs = Vec::new();
    for term in selected {
        let (b, cut, err) = compact_cutoff(&term.amplitude, zgrid, delta1);
        let part = effective_solution_fibered(t, &term.mode.eff, &b, term.mode.chi.as_slice().expect("contiguous"), zgrid, grid, params)?;
        state = state.add(&part)?;
        cutoff_errors.push(err);
        cutoffs.push(cut);
    }
    let error_budget = tail.max(0.0).sqrt() + cutoff_errors.iter().sum::<f64>();
    Ok((
        state,
        GeneralReport {
            kept_clusters: kept,
            tail_mass: tail,
            cutoff_errors,
            cutoffs,
            error_budget,
        },
    ))
}

fn tail_sum(terms: &[ExpansionTerm], kept: &[usize], zgrid: &ZGrid) -> f64 {
    terms.iter().filter(|x| kept.contains(&x.mode.cluster)).map(|x| x.mass(zgrid)).sum()
}

/// Smallest `P` on the grid with `|a - a 1{|p| <= P}| <= tol`. Amplitudes
/// vanishing at both ends of the grid already have compact support and are
/// returned unchanged.
fn compact_cutoff(a: &[Complex64], zgrid: &ZGrid, tol: f64) -> (Vec<Complex64>, f64, f64) {
    let zero = Complex64::new(0.0, 0.0);
    if a.first() == Some(&zero) && a.last() == Some(&zero) {
        let reach = (0..a.len()).filter(|&i| a[i] != zero).map(|i| zgrid.p(i).abs()).fold(0.0, f64::max);
        return (a.to_vec(), reach, 0.0);
    }
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|x, y| zgrid.p(*y).abs().total_cmp(&zgrid.p(*x).abs()));
    // drop from the largest |p| inwards while the discarded mass stays within tol^2
    let mut dropped = 0.0;
    let mut cut = f64::INFINITY;
    let mut k = 0;
    while k < order.len() {
        let pk = zgrid.p(order[k]).abs();
        let mut group = 0.0;
        let mut j = k;
        while j < order.len() && zgrid.p(order[j]).abs() == pk {
            group += a[order[j]].norm_sqr();
            j += 1;
        }
        if zgrid.dp() * (dropped + group) > tol * tol {
            break;
        }
        dropped += group;
        cut = pk;
        k = j;
    }
    let limit = if cut.is_finite() { cut } else { f64::INFINITY };
    let b: Vec<Complex64> = (0..a.len())
        .map(|i| if zgrid.p(i).abs() < limit { a[i] } else { Complex64::new(0.0, 0.0) })
        .collect();
    let kept_max = (0..a.len())
        .filter(|&i| b[i] != Complex64::new(0.0, 0.0))
        .map(|i| zgrid.p(i).abs())
        .fold(0.0, f64::max);
    (b, kept_max, (zgrid.dp() * dropped).sqrt())
}
