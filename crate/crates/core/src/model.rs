//! Closed-form profiles, scalar laws and initial data.
//!
//! Everything here is an analytic oracle: the solvers and diagnostics are
//! tested against these functions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, QuenchError, Result};
use crate::grid::{bracket, Grid, GridFunction};

/// The exponent `p < 0` together with the constants derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentConfig {
    pub p: f64,
    /// `min{4/(1-p), 2(2-p)/(1-p)^2, 1}`.
    pub q: f64,
    /// `4p/(p-1)^2`, the leading coefficient of the curvature law.
    pub kappa_b: f64,
    /// `2/(1-p)`.
    pub kappa_v: f64,
}

impl ExponentConfig {
    pub fn new(p: f64) -> Result<Self> {
        let q = q_exponent(p)?;
        Ok(Self {
            p,
            q,
            kappa_b: 4.0 * p / (p - 1.0).powi(2),
            kappa_v: 2.0 / (1.0 - p),
        })
    }

    /// Whether the `n = q` weighted condition is imposed (only for `p < -1`).
    pub fn uses_q_norm(&self) -> bool {
        self.p < -1.0
    }
}

pub(crate) fn check_p(p: f64) -> Result<()> {
    if p.is_finite() && p < 0.0 {
        Ok(())
    } else {
        Err(invalid("p", format!("exponent must be negative, got {p}")))
    }
}

pub fn q_exponent(p: f64) -> Result<f64> {
    check_p(p)?;
    let m = 1.0 - p;
    Ok((4.0 / m).min(2.0 * (2.0 - p) / (m * m)).min(1.0))
}

/// Spatially homogeneous solution `(u0^{1-p} - (1-p) t)^{1/(1-p)}`.
pub fn u_hom(u0: f64, p: f64, t: f64) -> Result<f64> {
    check_p(p)?;
    let t_star = quench_time_hom(u0, p)?;
    if !(t >= 0.0 && t < t_star) {
        return Err(QuenchError::OutOfRange(format!(
            "t = {t} outside [0, t* = {t_star})"
        )));
    }
    let m = 1.0 - p;
    Ok((u0.powf(m) - m * t).powf(1.0 / m))
}

pub fn quench_time_hom(u0: f64, p: f64) -> Result<f64> {
    check_p(p)?;
    if !(u0 > 0.0 && u0.is_finite()) {
        return Err(invalid("u0", format!("must be positive, got {u0}")));
    }
    Ok(u0.powf(1.0 - p) / (1.0 - p))
}

/// Parameters of the almost-solution `((1-p+b y^2)/(2c))^{1/(1-p)}` with `2c = a + 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    a: f64,
    b: f64,
}

impl ProfileParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && a > 0.0) {
            return Err(invalid("a", format!("must be positive, got {a}")));
        }
        if !(b.is_finite() && b >= 0.0) {
            return Err(invalid("b", format!("must be nonnegative, got {b}")));
        }
        Ok(Self { a, b })
    }

    /// Parameters with amplitude slot `c` (so `a = 2c - 1/2`).
    pub fn from_c(c: f64, b: f64) -> Result<Self> {
        Self::new(2.0 * c - 0.5, b)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn c(&self) -> f64 {
        0.5 * (self.a + 0.5)
    }

    /// `2c = a + 1/2`.
    pub fn two_c(&self) -> f64 {
        self.a + 0.5
    }
}

/// `((1-p+b y^2)/(2c))^{1/(1-p)}`, evaluated in log space.
pub fn v_profile(params: ProfileParams, p: f64, y: f64) -> f64 {
    let m = 1.0 - p;
    (((m + params.b * y * y) / params.two_c()).ln() / m).exp()
}

/// Analytic `∂_y` of [`v_profile`].
pub fn v_profile_dy(params: ProfileParams, p: f64, y: f64) -> f64 {
    let m = 1.0 - p;
    v_profile(params, p, y) * 2.0 * params.b * y / (m * (m + params.b * y * y))
}

/// `v_profile * e^{-a y^2/4}`.
pub fn gauged_profile(params: ProfileParams, p: f64, y: f64) -> f64 {
    let m = 1.0 - p;
    (((m + params.b * y * y) / params.two_c()).ln() / m - 0.25 * params.a * y * y).exp()
}

/// Two-valued barrier `g(y, beta)`.
pub fn lower_envelope(y: f64, beta: f64, p: f64) -> f64 {
    let m = 1.0 - p;
    if beta * y * y <= 4.0 * m {
        (m / 2.0).powf(1.0 / m)
    } else {
        (2.0 * m).powf(1.0 / m)
    }
}

/// `K = 2c0 + 2b0/(1-p)`, the normalisation constant of the comparison barrier.
pub fn barrier_constant(b0: f64, c0: f64, p: f64) -> f64 {
    2.0 * c0 + 2.0 * b0 / (1.0 - p)
}

/// `K^{1/(p-1)} g(K^{1/2} y, beta)`, the pointwise lower bound on the solution.
pub fn comparison_envelope(y: f64, b0: f64, c0: f64, beta: f64, p: f64) -> f64 {
    let k = barrier_constant(b0, c0, p);
    k.powf(1.0 / (p - 1.0)) * lower_envelope(k.sqrt() * y, beta, p)
}

/// Reference curvature `1/(1/b0 - (4p/(p-1)^2) tau)`; `b0 = 0` gives the limit 0.
pub fn beta_of_tau(b0: f64, p: f64, tau: f64) -> Result<f64> {
    check_p(p)?;
    if !(b0 >= 0.0 && b0.is_finite()) {
        return Err(invalid("b0", format!("must be nonnegative, got {b0}")));
    }
    if !(tau >= 0.0) {
        return Err(invalid("tau", format!("must be nonnegative, got {tau}")));
    }
    if b0 == 0.0 {
        return Ok(0.0);
    }
    let kappa = 4.0 * p / (p - 1.0).powi(2);
    Ok(1.0 / (1.0 / b0 - kappa * tau))
}

/// Shape of the perturbation added to the exact profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Perturbation {
    Zero,
    GaussianBump,
    #[default]
    Hermite4Mode,
}

impl Perturbation {
    pub fn as_str(self) -> &'static str {
        match self {
            Perturbation::Zero => "zero",
            Perturbation::GaussianBump => "gaussian-bump",
            Perturbation::Hermite4Mode => "hermite4-mode",
        }
    }
}

impl std::str::FromStr for Perturbation {
    type Err = QuenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Perturbation::Zero),
            "gaussian-bump" => Ok(Perturbation::GaussianBump),
            "hermite4-mode" => Ok(Perturbation::Hermite4Mode),
            other => Err(invalid(
                "perturbation",
                format!("unknown id `{other}` (expected zero, gaussian-bump or hermite4-mode)"),
            )),
        }
    }
}

impl std::fmt::Display for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Initial data `u0 = ((1-p+b0 x^2)/(2c0))^{1/(1-p)} + perturbation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialDataSpec {
    pub b0: f64,
    pub c0: f64,
    pub delta0: f64,
    pub perturbation: Perturbation,
    pub lambda0: f64,
}

impl Default for InitialDataSpec {
    fn default() -> Self {
        Self {
            b0: 0.05,
            c0: 0.5,
            delta0: 0.0,
            perturbation: Perturbation::default(),
            lambda0: 1.0,
        }
    }
}

impl InitialDataSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.b0 >= 0.0 && self.b0.is_finite()) {
            return Err(invalid("b0", format!("must be nonnegative, got {}", self.b0)));
        }
        check_c0(self.c0)?;
        if !(self.delta0 >= 0.0 && self.delta0.is_finite()) {
            return Err(invalid(
                "delta0",
                format!("must be nonnegative, got {}", self.delta0),
            ));
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return Err(invalid(
                "lambda0",
                format!("must be positive, got {}", self.lambda0),
            ));
        }
        Ok(())
    }

    pub fn profile(&self) -> Result<ProfileParams> {
        ProfileParams::from_c(self.c0, self.b0)
    }
}

pub(crate) fn check_c0(c0: f64) -> Result<()> {
    if (0.5..=2.0).contains(&c0) {
        Ok(())
    } else {
        Err(invalid("c0", format!("must lie in [1/2, 2], got {c0}")))
    }
}

/// Builds `u0` on `grid`, clipping the perturbed candidate from below to the
/// comparison barrier and re-verifying the weighted bounds.
pub fn generate_initial_data(spec: &InitialDataSpec, p: f64, grid: Grid) -> Result<GridFunction> {
    check_p(p)?;
    spec.validate()?;
    let profile = spec.profile()?;
    let exact = GridFunction::from_even_fn(grid, |x| v_profile(profile, p, x));
    let amplitude = spec.delta0 * spec.b0.powf(1.5);
    if amplitude == 0.0 || spec.perturbation == Perturbation::Zero {
        return Ok(exact);
    }
    let shape = match spec.perturbation {
        Perturbation::Zero => unreachable!(),
        Perturbation::GaussianBump => {
            let b0 = spec.b0;
            GridFunction::from_even_fn(grid, |x| {
                -amplitude * x * x * bracket(x) * (-0.5 * b0 * x * x).exp()
            })
        }
        Perturbation::Hermite4Mode => hermite4_mode(grid, profile.a())?.scale(amplitude),
    };
    let candidate = exact.add(&shape)?;
    let u0 = candidate.map_with_node(|x, u| {
        u.max(comparison_envelope(x, spec.b0, spec.c0, spec.b0, p))
    });
    u0.check_positive()
        .map_err(|e| QuenchError::Infeasible(format!("positivity: {e}")))?;
    check_weighted_bounds(&u0, &exact, spec, p)?;
    Ok(u0)
}

/// Fourth Hermite function in the gauge `a`, made orthogonal (in grid quadrature)
/// to `e^{-a y^2/2}` and `(1 - a y^2) e^{-a y^2/2}` and scaled to unit sup norm.
pub fn hermite4_mode(grid: Grid, a: f64) -> Result<GridFunction> {
    let sa = a.sqrt();
    let he4 = GridFunction::from_even_fn(grid, |x| {
        let s = sa * x;
        (s.powi(4) - 6.0 * s * s + 3.0) * (-0.25 * a * x * x).exp()
    });
    let e0 = GridFunction::from_even_fn(grid, |x| (-0.25 * a * x * x).exp());
    let e2 = GridFunction::from_even_fn(grid, |x| x * x * (-0.25 * a * x * x).exp());
    let w0 = GridFunction::from_even_fn(grid, |x| (-0.5 * a * x * x).exp());
    let w2 = GridFunction::from_even_fn(grid, |x| (1.0 - a * x * x) * (-0.5 * a * x * x).exp());
    // Solve [<e0,w0> <e2,w0>; <e0,w2> <e2,w2>] c = [<he4,w0>; <he4,w2>].
    let m00 = e0.inner_product(&w0)?;
    let m01 = e2.inner_product(&w0)?;
    let m10 = e0.inner_product(&w2)?;
    let m11 = e2.inner_product(&w2)?;
    let r0 = he4.inner_product(&w0)?;
    let r1 = he4.inner_product(&w2)?;
    let det = m00 * m11 - m01 * m10;
    if det.abs() < 1e-300 {
        return Err(QuenchError::Infeasible("degenerate hermite4 orthogonalisation".into()));
    }
    let c0 = (r0 * m11 - m01 * r1) / det;
    let c2 = (m00 * r1 - m10 * r0) / det;
    let mode = GridFunction::from_half(
        grid,
        &he4.half()
            .iter()
            .zip(e0.half().iter().zip(e2.half()))
            .map(|(h, (a0, a2))| h - c0 * a0 - c2 * a2)
            .collect::<Vec<_>>(),
    )?;
    let sup = mode.sup_norm();
    Ok(mode.scale(1.0 / sup))
}

fn check_weighted_bounds(
    u0: &GridFunction,
    exact: &GridFunction,
    spec: &InitialDataSpec,
    p: f64,
) -> Result<()> {
    let diff = u0.sub(exact)?;
    let mut orders = vec![2.0, 3.0];
    if p < -1.0 {
        orders.push(q_exponent(p)?);
    }
    for n in orders {
        let norm = diff.weighted_sup_norm(n, 0.0)?;
        let bound = spec.delta0 * spec.b0.powf(n / 2.0);
        if norm > bound * (1.0 + 1e-12) {
            return Err(QuenchError::Infeasible(format!(
                "weighted bound n = {n}: |<x>^-n (u0 - profile)| = {norm:e} exceeds delta0 b0^(n/2) = {bound:e}"
            )));
        }
    }
    Ok(())
}

/// Initial data after the `k0` rescaling `u -> k0^{2/(p-1)} u(k0 x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedData {
    pub u: GridFunction,
    pub k0: f64,
    pub delta1: f64,
    pub beta: f64,
}

impl NormalizedData {
    /// Profile parameters of the rescaled leading term: `a + 1/2 = 1 - 2 beta/(1-p)`.
    pub fn profile(&self, p: f64) -> Result<ProfileParams> {
        normalized_profile(self.beta, p)
    }
}

/// `(a, b)` with `a + 1/2 = 1 - 2 beta/(1-p)` and `b = beta`.
pub fn normalized_profile(beta: f64, p: f64) -> Result<ProfileParams> {
    ProfileParams::new(0.5 - 2.0 * beta / (1.0 - p), beta)
}

pub fn normalize_initial_data(
    u0: &GridFunction,
    b0: f64,
    c0: f64,
    delta0: f64,
    p: f64,
) -> Result<NormalizedData> {
    check_p(p)?;
    check_c0(c0)?;
    if !(b0 >= 0.0) {
        return Err(invalid("b0", format!("must be nonnegative, got {b0}")));
    }
    let k0 = barrier_constant(b0, c0, p).powf(-0.5);
    let prefactor = k0.powf(2.0 / (p - 1.0));
    let grid = *u0.grid();
    let half = grid.nodes()[grid.center()..]
        .iter()
        .map(|&x| u0.interpolate(k0 * x).map(|v| prefactor * v))
        .collect::<Result<Vec<_>>>()?;
    Ok(NormalizedData {
        u: GridFunction::from_half(grid, &half)?,
        k0,
        delta1: delta0 * prefactor,
        beta: b0 * k0 * k0,
    })
}
