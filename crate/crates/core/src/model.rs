//! Physical model: parameters, azimuthal profiles, the confining and effective
//! potentials, and the singular tail term of the rescaled fiber Hamiltonian.
//!
//! All potentials are evaluated in the rescaled variables, where the fiber
//! Hamiltonian reads `H + eta * (p * Vhat + eta^(gamma-alpha-1) * W)` with
//! `eta = eps^beta` and `beta = 1 / (alpha + 1)`.

use std::f64::consts::PI;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of angles used to certify the positivity bounds of a profile.
pub const PROFILE_SAMPLES: usize = 4096;

/// Angular factor `Theta(theta) = c0 + sum_k a_k cos(k theta) + sum_k b_k sin(k theta)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AzimuthalProfile {
    constant: f64,
    cos: Vec<f64>,
    sin: Vec<f64>,
    lower: f64,
    upper: f64,
}

impl AzimuthalProfile {
    pub fn constant(c: f64) -> Result<Self> {
        Self::series(c, Vec::new(), Vec::new())
    }

    /// `coeffs[0]` is the constant term, `coeffs[k]` multiplies `cos(k theta)`.
    pub fn cosine_series(coeffs: &[f64]) -> Result<Self> {
        let (c0, rest) = coeffs
            .split_first()
            .ok_or_else(|| Error::InvalidInput("empty cosine series".into()))?;
        Self::series(*c0, rest.to_vec(), Vec::new())
    }

    /// General trigonometric series; `cos[k-1]` and `sin[k-1]` are the
    /// coefficients of harmonic `k`.
    pub fn series(constant: f64, cos: Vec<f64>, sin: Vec<f64>) -> Result<Self> {
        if !constant.is_finite() || cos.iter().chain(&sin).any(|c| !c.is_finite()) {
            return Err(Error::assumption(
                "profile-positivity",
                "profile coefficients must be finite",
            ));
        }
        let mut profile = AzimuthalProfile {
            constant,
            cos,
            sin,
            lower: f64::NAN,
            upper: f64::NAN,
        };
        let (lower, upper) = (0..PROFILE_SAMPLES)
            .map(|i| profile.eval(2.0 * PI * i as f64 / PROFILE_SAMPLES as f64))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        if lower <= 0.0 {
            return Err(Error::assumption(
                "profile-positivity",
                format!("profile must be bounded below by a positive constant, sampled min = {lower}"),
            ));
        }
        let wrap = (profile.eval(0.0) - profile.eval(2.0 * PI)).abs();
        if wrap >= 1e-12 {
            return Err(Error::assumption(
                "profile-positivity",
                format!("profile is not 2pi-periodic (jump {wrap:.3e})"),
            ));
        }
        profile.lower = lower;
        profile.upper = upper;
        Ok(profile)
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let mut v = self.constant;
        for (k, a) in self.cos.iter().enumerate() {
            v += a * ((k + 1) as f64 * theta).cos();
        }
        for (k, b) in self.sin.iter().enumerate() {
            v += b * ((k + 1) as f64 * theta).sin();
        }
        v
    }

    /// Sampled lower bound `c1`.
    pub fn lower_bound(&self) -> f64 {
        self.lower
    }

    /// Sampled upper bound `c2`.
    pub fn upper_bound(&self) -> f64 {
        self.upper
    }

    pub fn is_constant(&self) -> bool {
        self.cos.iter().chain(&self.sin).all(|c| *c == 0.0)
    }

    /// Profile multiplied by a positive constant.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::series(
            c * self.constant,
            self.cos.iter().map(|a| c * a).collect(),
            self.sin.iter().map(|b| c * b).collect(),
        )
    }
}

/// Additional homogeneous term `coeff * |y|^exponent * Theta_l(theta)` of the tail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousTerm {
    pub exponent: f64,
    pub coeff: f64,
    pub profile: Option<AzimuthalProfile>,
}

/// Polynomially bounded tail `a(y)`: `coeff * |y|^gamma` inside the unit disk,
/// `coeff * |y|^delta` outside, optionally with an angular factor and a sum of
/// extra homogeneous terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailSpec {
    pub gamma: f64,
    pub delta: f64,
    pub coeff: f64,
    pub profile: Option<AzimuthalProfile>,
    pub extra: Vec<HomogeneousTerm>,
}

impl TailSpec {
    pub fn new(gamma: f64, delta: f64, coeff: f64) -> Self {
        TailSpec {
            gamma,
            delta,
            coeff,
            profile: None,
            extra: Vec::new(),
        }
    }

    pub fn with_term(mut self, term: HomogeneousTerm) -> Self {
        self.extra.push(term);
        self
    }

    fn validate(&self, alpha: f64) -> Result<()> {
        let ok = self.gamma.is_finite()
            && self.delta.is_finite()
            && self.coeff.is_finite()
            && 3.0 + alpha <= self.gamma
            && self.gamma <= self.delta;
        if !ok {
            return Err(Error::assumption(
                "tail-exponents",
                format!(
                    "need 3 + alpha <= gamma <= delta < inf, got alpha = {alpha}, gamma = {}, delta = {}",
                    self.gamma, self.delta
                ),
            ));
        }
        for term in &self.extra {
            if !(self.gamma <= term.exponent && term.exponent <= self.delta) || !term.coeff.is_finite() {
                return Err(Error::assumption(
                    "tail-exponents",
                    format!(
                        "homogeneous term exponent {} outside [gamma, delta] = [{}, {}]",
                        term.exponent, self.gamma, self.delta
                    ),
                ));
            }
        }
        Ok(())
    }

    /// `a(y)` at a point given in polar form.
    pub fn eval(&self, r: f64, theta: f64) -> f64 {
        let radial = if r < 1.0 {
            r.powf(self.gamma)
        } else {
            r.powf(self.delta)
        };
        let ang = self.profile.as_ref().map_or(1.0, |p| p.eval(theta));
        let mut v = self.coeff * radial * ang;
        for term in &self.extra {
            let ang = term.profile.as_ref().map_or(1.0, |p| p.eval(theta));
            v += term.coeff * r.powf(term.exponent) * ang;
        }
        v
    }
}

/// Validated model parameters. `beta` is always derived from `alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    alpha: f64,
    epsilon: f64,
    theta: AzimuthalProfile,
    tail: Option<TailSpec>,
    p0: f64,
}

/// Build and validate a model.
pub fn make_model(
    alpha: f64,
    theta: AzimuthalProfile,
    epsilon: f64,
    tail: Option<TailSpec>,
    p0: f64,
) -> Result<ModelParams> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::assumption("alpha > 0", format!("alpha = {alpha}")));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::assumption(
            "epsilon in (0, 1]",
            format!("epsilon = {epsilon}"),
        ));
    }
    if theta.lower_bound() <= 0.0 {
        return Err(Error::assumption(
            "profile-positivity",
            format!("profile lower bound {}", theta.lower_bound()),
        ));
    }
    if !(p0 >= 0.0 && p0.is_finite()) {
        return Err(Error::assumption("p0 >= 0", format!("p0 = {p0}")));
    }
    if let Some(t) = &tail {
        t.validate(alpha)?;
    }
    Ok(ModelParams {
        alpha,
        epsilon,
        theta,
        tail,
        p0,
    })
}

impl ModelParams {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        1.0 / (self.alpha + 1.0)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `eps^beta`, the natural small parameter.
    pub fn eta(&self) -> f64 {
        self.epsilon.powf(self.beta())
    }

    pub fn theta(&self) -> &AzimuthalProfile {
        &self.theta
    }

    pub fn tail(&self) -> Option<&TailSpec> {
        self.tail.as_ref()
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    /// Same model at another field strength.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        make_model(self.alpha, self.theta.clone(), epsilon, self.tail.clone(), self.p0)
    }

    /// Same model with the tail removed.
    pub fn without_tail(&self) -> Self {
        ModelParams {
            tail: None,
            ..self.clone()
        }
    }

    /// Same model with a different profile.
    pub fn with_theta(&self, theta: AzimuthalProfile) -> Result<Self> {
        make_model(self.alpha, theta, self.epsilon, self.tail.clone(), self.p0)
    }

    /// `|x|^alpha Theta(theta)`.
    pub fn field_magnitude(&self, r: f64, theta: f64) -> f64 {
        r.powf(self.alpha) * self.theta.eval(theta)
    }
}

/// Finite-difference stencil for the Laplacian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stencil {
    /// Second-order 5-point stencil.
    FivePoint,
    /// Fourth-order 9-point cross stencil with odd reflection at the box edge.
    FourthOrder,
}

impl Stencil {
    /// Off-diagonal weights (times `h^2`) of the 1D stencil at distance 1, 2.
    pub(crate) fn neighbour_weights(self) -> &'static [f64] {
        match self {
            Stencil::FivePoint => &[-1.0],
            Stencil::FourthOrder => &[-4.0 / 3.0, 1.0 / 12.0],
        }
    }

    /// 1D diagonal weight (times `h^2`) at distance `edge` from the nearest wall
    /// (`edge = 0` is the node next to the Dirichlet boundary).
    pub(crate) fn centre_weight(self, edge: usize) -> f64 {
        match self {
            Stencil::FivePoint => 2.0,
            // ghost u_{-2} = -u_0 folds back onto the diagonal
            Stencil::FourthOrder if edge == 0 => 2.5 - 1.0 / 12.0,
            Stencil::FourthOrder => 2.5,
        }
    }

    pub fn reach(self) -> usize {
        self.neighbour_weights().len()
    }
}

/// Truncated Cartesian grid on `[-L, L]^2` with `n` nodes per axis.
///
/// Node `(i, j)` sits at `(-L + i h, -L + j h)` and has flat index `i * n + j`.
/// All nodes are unknowns; the Dirichlet wall lies one spacing outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    half_width: f64,
    n: usize,
    stencil: Stencil,
}

impl Grid2D {
    pub fn new(half_width: f64, n: usize) -> Result<Self> {
        if n < 16 || !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "grid needs n >= 16 and L > 0, got n = {n}, L = {half_width}"
            )));
        }
        Ok(Grid2D {
            half_width,
            n,
            stencil: Stencil::FourthOrder,
        })
    }

    pub fn with_stencil(mut self, stencil: Stencil) -> Self {
        self.stencil = stencil;
        self
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.n * self.n
    }

    pub fn stencil(&self) -> Stencil {
        self.stencil
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.n - 1) as f64
    }

    /// Quadrature weight `h^2` of a node.
    pub fn cell_area(&self) -> f64 {
        let h = self.spacing();
        h * h
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }

    /// Cartesian coordinates of a flat index.
    pub fn node(&self, k: usize) -> (f64, f64) {
        (self.coord(k / self.n), self.coord(k % self.n))
    }

    /// Polar coordinates of a flat index; the angle is 0 at the origin.
    pub fn polar(&self, k: usize) -> (f64, f64) {
        let (x, y) = self.node(k);
        let r = x.hypot(y);
        let theta = if r == 0.0 {
            0.0
        } else {
            y.atan2(x).rem_euclid(2.0 * PI)
        };
        (r, theta)
    }

    /// Field from a function of polar coordinates.
    pub fn tabulate_polar(&self, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        ScalarField::new(
            (0..self.dim())
                .map(|k| {
                    let (r, t) = self.polar(k);
                    f(r, t)
                })
                .collect(),
        )
    }

    /// Discrete L2 inner product with weight `h^2`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.cell_area() * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.inner(a, a).sqrt()
    }
}

/// Real nodal values on a [`Grid2D`] in flat index order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    values: Array1<f64>,
}

impl ScalarField {
    pub fn new(values: Array1<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite field value");
        ScalarField { values }
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("contiguous field")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `(n, n)` view, first axis along `x1`.
    pub fn as_grid(&self, grid: &Grid2D) -> ArrayView2<'_, f64> {
        self.values
            .view()
            .into_shape_with_order((grid.n(), grid.n()))
            .expect("field matches grid")
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `V0(x) = |x|^(2 alpha) Theta(theta)^2`.
pub fn eval_confining_potential(grid: &Grid2D, params: &ModelParams) -> ScalarField {
    grid.tabulate_polar(|r, t| {
        let f = params.field_magnitude(r, t);
        f * f
    })
}

/// `Vhat(x) = eps^beta p + 2 |x|^alpha Theta(theta)`.
pub fn eval_effective_potential(grid: &Grid2D, params: &ModelParams, p: f64) -> ScalarField {
    let shift = params.eta() * p;
    grid.tabulate_polar(|r, t| shift + 2.0 * params.field_magnitude(r, t))
}

/// Singular term together with its measured growth constant.
#[derive(Clone, Debug)]
pub struct SingularTerm {
    pub field: ScalarField,
    /// `max_x |W(x)| / ((1 + |p|) (1 + |x|)^(2 delta))` over the grid.
    pub bound_ratio: f64,
}

/// Value of the singular term `W_a^{eps,p}` at one point.
pub fn singular_term_at(params: &ModelParams, tail: &TailSpec, p: f64, r: f64, theta: f64) -> f64 {
    let eps = params.epsilon();
    let beta = params.beta();
    let alpha = params.alpha();
    let eta = params.eta();
    let a = tail.eval(eta * r, theta);
    let f = params.field_magnitude(r, theta);
    let pref = eps.powf(beta * (alpha - tail.gamma + 2.0));
    // cross term of the expanded square (p + A_z)^2 carries a plus sign
    pref * (2.0 * eps.powf(-2.0 + beta * alpha) * f * a + 2.0 * p * a / eps + a * a / (eps * eps))
}

/// Singular tail contribution `W_a^{eps,p}` on the grid.
pub fn eval_singular_term(grid: &Grid2D, params: &ModelParams, p: f64) -> Result<SingularTerm> {
    let tail = params.tail().ok_or(Error::TailMissing)?;
    let field = grid.tabulate_polar(|r, t| singular_term_at(params, tail, p, r, t));
    let bound_ratio = (0..grid.dim())
        .map(|k| {
            let (r, _) = grid.polar(k);
            field.values[k].abs() / ((1.0 + p.abs()) * (1.0 + r).powf(2.0 * tail.delta))
        })
        .fold(0.0, f64::max);
    Ok(SingularTerm { field, bound_ratio })
}
