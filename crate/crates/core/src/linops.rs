//! Linearisation about the profile family.
//!
//! Two pieces live here. The first is the source/nonlinearity split of the
//! fluctuation equation `xi_tau = -L(a,b) xi + F(a,b) + N(a,b,xi)`. The second
//! is the frozen harmonic oscillator
//!
//! ```text
//! L_alpha = -d^2/dz^2 + (alpha^2/4) z^2 - alpha/2 - 2 alpha/(1-p)
//! ```
//!
//! with its Hermite eigenpairs, spectral projections and Mehler propagator.
//!
//! Functions `g` in the oscillator picture are often handled through their
//! *h-form* `h = e^{alpha z^2/4} g`. In that form the weighted norms become
//! plain `sup <z>^{-n} |h|`, the projections remove Hermite polynomials with
//! respect to `e^{-alpha z^2/2}`, and `e^{-sigma L_alpha}` is an
//! Ornstein-Uhlenbeck expectation:
//!
//! ```text
//! h  ->  e^{2 alpha sigma/(1-p)} E[h(Y)],
//! Y ~ N(e^{-alpha sigma} z, (1 - e^{-2 alpha sigma})/alpha).
//! ```
//!
//! The prefactor of that kernel is fixed by `e^{-sigma L_alpha} phi_0 =
//! e^{2 alpha sigma/(1-p)} phi_0`.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::direct::linear_fit;
use crate::error::{invalid, QuenchError, Result};
use crate::grid::{bracket, gaussian_average, Extension, Grid, GridFunction};
use crate::model::{check_p, v_profile, ProfileParams};
use crate::par::{map_slice, Execution};

/// `L_alpha`, optionally with the potential `2 p alpha/(1-p+beta z^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrozenOperatorSpec {
    pub alpha: f64,
    pub p: f64,
    /// `Some(beta)` selects `L_alpha + V_beta`.
    pub beta: Option<f64>,
}

impl FrozenOperatorSpec {
    pub fn plain(alpha: f64, p: f64) -> Self {
        Self { alpha, p, beta: None }
    }

    pub fn with_potential(alpha: f64, p: f64, beta: f64) -> Self {
        Self { alpha, p, beta: Some(beta) }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_p(self.p)?;
        if let Some(beta) = self.beta {
            if !(beta >= 0.0 && beta.is_finite()) {
                return Err(invalid("beta", format!("must be nonnegative, got {beta}")));
            }
        }
        Ok(())
    }

    /// `V(z) = 2 p alpha/(1-p+beta z^2)`, zero without the potential.
    pub fn potential(&self, z: f64) -> f64 {
        match self.beta {
            Some(beta) => 2.0 * self.p * self.alpha / (1.0 - self.p + beta * z * z),
            None => 0.0,
        }
    }

    /// Multiplicative part `(alpha^2/4) z^2 - alpha/2 - 2 alpha/(1-p) + V(z)`.
    pub fn multiplier(&self, z: f64) -> f64 {
        let a = self.alpha;
        0.25 * a * a * z * z - 0.5 * a - 2.0 * a / (1.0 - self.p) + self.potential(z)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(invalid("alpha", format!("must be positive, got {alpha}")))
    }
}

#[allow(non_snake_case)]
pub fn apply_L_alpha(f: &GridFunction, spec: &FrozenOperatorSpec) -> Result<GridFunction> {
    spec.validate()?;
    let lap = f.laplacian()?;
    let values = f
        .values()
        .iter()
        .zip(lap.values())
        .enumerate()
        .map(|(i, (&v, &d2))| -d2 + spec.multiplier(f.grid().node(i)) * v)
        .collect();
    GridFunction::new(*f.grid(), values)
}

/// `n alpha - 2 alpha/(1-p)`.
pub fn eigenvalue(n: usize, alpha: f64, p: f64) -> f64 {
    n as f64 * alpha - 2.0 * alpha / (1.0 - p)
}

/// Normalised Hermite polynomial in h-form: `phi_n = (alpha/2pi)^{1/4} psi_n e^{-alpha z^2/4}`.
fn hermite_poly(n: usize, alpha: f64, z: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => alpha.sqrt() * z,
        2 => (1.0 - alpha * z * z) / std::f64::consts::SQRT_2,
        _ => unreachable!("checked by callers"),
    }
}

fn check_mode(n: usize) -> Result<()> {
    if n <= 2 {
        Ok(())
    } else {
        Err(invalid("n", format!("only modes 0, 1, 2 are available, got {n}")))
    }
}

/// Eigenvalue and `L^2`-normalised eigenfunction `phi_n` of `L_alpha`, `n <= 2`.
pub fn eigenpair(n: usize, alpha: f64, p: f64, grid: Grid) -> Result<(f64, GridFunction)> {
    check_mode(n)?;
    check_alpha(alpha)?;
    check_p(p)?;
    let c = (alpha / (2.0 * PI)).powf(0.25);
    let phi = GridFunction::from_fn(grid, |z| {
        c * hermite_poly(n, alpha, z) * (-0.25 * alpha * z * z).exp()
    });
    Ok((eigenvalue(n, alpha, p), phi))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(invalid("sigma", format!("must be positive, got {sigma}")))
    }
}

/// `e^{-sigma L_alpha} f`.
pub fn mehler_apply(f: &GridFunction, alpha: f64, p: f64, sigma: f64) -> Result<GridFunction> {
    mehler_apply_with(f, alpha, p, sigma, Execution::default())
}

pub fn mehler_apply_with(
    f: &GridFunction,
    alpha: f64,
    p: f64,
    sigma: f64,
    exec: Execution,
) -> Result<GridFunction> {
    let h = f.map_with_node(|z, v| v * (0.25 * alpha * z * z).exp());
    h.check_finite()?;
    let out = mehler_h(&h, alpha, p, sigma, exec)?;
    Ok(out.map_with_node(|z, v| v * (-0.25 * alpha * z * z).exp()))
}

/// `e^{-sigma L_alpha}` acting on the h-form. Values past the grid are
/// continued linearly.
pub fn mehler_h(
    h: &GridFunction,
    alpha: f64,
    p: f64,
    sigma: f64,
    exec: Execution,
) -> Result<GridFunction> {
    check_alpha(alpha)?;
    check_p(p)?;
    check_sigma(sigma)?;
    let contraction = (-alpha * sigma).exp();
    let variance = -(-2.0 * alpha * sigma).exp_m1() / alpha;
    let growth = (2.0 * alpha * sigma / (1.0 - p)).exp();
    Ok(gaussian_average(h, contraction, variance, Extension::Linear, exec).scale(growth))
}

/// Orthonormal basis of the first `n` modes in a weighted trapezoid product.
struct Projector {
    weight: Vec<f64>,
    basis: Vec<Vec<f64>>,
    h: f64,
}

impl Projector {
    fn new(grid: Grid, n: usize, alpha: f64, h_form: bool) -> Result<Self> {
        check_alpha(alpha)?;
        if !(1..=3).contains(&n) {
            return Err(invalid("n", format!("projection index must be 1, 2 or 3, got {n}")));
        }
        let nodes = grid.nodes();
        let weight: Vec<f64> = if h_form {
            nodes.iter().map(|z| (-0.5 * alpha * z * z).exp()).collect()
        } else {
            vec![1.0; nodes.len()]
        };
        let mut proj = Self { weight, basis: Vec::new(), h: grid.spacing() };
        for m in 0..n {
            let mut v: Vec<f64> = nodes
                .iter()
                .map(|&z| {
                    let poly = hermite_poly(m, alpha, z);
                    if h_form {
                        poly
                    } else {
                        poly * (-0.25 * alpha * z * z).exp()
                    }
                })
                .collect();
            // Gram-Schmidt twice against the discrete product.
            for _ in 0..2 {
                for e in &proj.basis {
                    let c = proj.dot(e, &v);
                    v.iter_mut().zip(e).for_each(|(x, y)| *x -= c * y);
                }
            }
            let norm = proj.dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            proj.basis.push(v);
        }
        Ok(proj)
    }

    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let term = |i: usize| a[i] * b[i] * self.weight[i];
        let inner: f64 = (1..n - 1).map(term).sum();
        self.h * (inner + 0.5 * (term(0) + term(n - 1)))
    }

    fn apply(&self, f: &GridFunction) -> GridFunction {
        let mut v = f.values().to_vec();
        for e in &self.basis {
            let c = self.dot(e, &v);
            v.iter_mut().zip(e).for_each(|(x, y)| *x -= c * y);
        }
        GridFunction::new(*f.grid(), v).expect("same length")
    }
}

/// `P_n = 1 - sum_{m<n} |phi_m><phi_m|`, `n in {1,2,3}`.
pub fn project(f: &GridFunction, n: usize, alpha: f64) -> Result<GridFunction> {
    Ok(Projector::new(*f.grid(), n, alpha, false)?.apply(f))
}

/// [`project`] expressed on the h-form.
pub fn project_h(h: &GridFunction, n: usize, alpha: f64) -> Result<GridFunction> {
    Ok(Projector::new(*h.grid(), n, alpha, true)?.apply(h))
}

// ---------------------------------------------------------------------------
// Propagator decay

/// Which estimate of the projected propagator is exercised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum DecayMode {
    /// `e^{-sigma L_alpha} P_2`, weight `<z>^{-2}`.
    P2Plain,
    /// `e^{-sigma L_alpha} P_1`, weight `<z>^{-k}`, `k in [0,1]`.
    P1Weighted { k: f64 },
    /// `P_3 U P_3` for the frozen `L_alpha + V_beta`, weight `<z>^{-3}`.
    P3Full { beta: f64 },
}

impl DecayMode {
    /// Exponent `n` of the weight `<z>^{-n}`.
    pub fn weight(&self) -> f64 {
        match *self {
            DecayMode::P2Plain => 2.0,
            DecayMode::P1Weighted { k } => k,
            DecayMode::P3Full { .. } => 3.0,
        }
    }

    /// Predicted exponential rate; `None` where only `-c0 < 0` is known.
    pub fn predicted_rate(&self, alpha: f64, p: f64) -> Option<f64> {
        match *self {
            DecayMode::P2Plain => Some(2.0 * alpha * p / (1.0 - p)),
            DecayMode::P1Weighted { k } => Some((2.0 / (1.0 - p) - k) * alpha),
            DecayMode::P3Full { .. } => None,
        }
    }

    fn projection(&self) -> usize {
        match self {
            DecayMode::P2Plain => 2,
            DecayMode::P1Weighted { .. } => 1,
            DecayMode::P3Full { .. } => 3,
        }
    }
}

impl fmt::Display for DecayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecayMode::P2Plain => write!(f, "p2-plain"),
            DecayMode::P1Weighted { k } => write!(f, "p1-weighted-k{k}"),
            DecayMode::P3Full { beta } => write!(f, "p3-full-beta{beta}"),
        }
    }
}

/// A test function given in h-form.
#[derive(Clone)]
pub struct SampleFunction {
    pub name: String,
    profile: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl SampleFunction {
    pub fn new(name: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), profile: Arc::new(f) }
    }

    pub fn eval(&self, z: f64) -> f64 {
        (self.profile)(z)
    }
}

impl fmt::Debug for SampleFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SampleFunction").field("name", &self.name).finish()
    }
}

/// Even functions `<z>^n s(z)` with bounded `s`, plus a pure fourth Hermite mode.
pub fn default_samples(n: f64, alpha: f64) -> Vec<SampleFunction> {
    let w = move |z: f64| bracket(z).powf(n);
    vec![
        SampleFunction::new("cos", move |z| w(z) * z.cos()),
        SampleFunction::new("gauss8", move |z| w(z) * (-z * z / 8.0).exp()),
        SampleFunction::new("rational", move |z| w(z) * z * z / (1.0 + z * z)),
        SampleFunction::new("tanh", move |z| w(z) * (z * z).tanh()),
        SampleFunction::new("cos-half", move |z| w(z) * (0.5 * z).cos() / (1.0 + 0.1 * z * z).sqrt()),
        SampleFunction::new("hermite4", move |z| {
            let x2 = alpha * z * z;
            x2 * x2 - 6.0 * x2 + 3.0
        }),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayConfig {
    pub mode: DecayMode,
    pub alpha: f64,
    pub p: f64,
    pub grid: Grid,
    /// Sampling times; for [`DecayMode::P3Full`] rounded to multiples of `dsigma`.
    pub sigmas: Vec<f64>,
    /// Lie step of the frozen propagator.
    pub dsigma: f64,
    /// Norms are taken over `|z| <= window` to keep the continuation past the
    /// grid out of the measurement.
    pub window: f64,
    pub exec: Execution,
}

impl DecayConfig {
    pub fn new(mode: DecayMode, alpha: f64, p: f64) -> Result<Self> {
        check_alpha(alpha)?;
        // Room for ten kernel widths past the measurement window.
        let window = 12.0;
        let half_width = (window + 10.0 / alpha.sqrt()).ceil();
        let grid = Grid::new(half_width, 20 * half_width as usize + 1)?;
        Ok(Self {
            mode,
            alpha,
            p,
            grid,
            // Rates scale with alpha; sample alpha sigma in [1/4, 4].
            sigmas: (1..=16).map(|k| 0.25 * k as f64 / alpha).collect(),
            dsigma: 0.05,
            window,
            exec: Execution::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_p(self.p)?;
        if let DecayMode::P1Weighted { k } = self.mode {
            if !(0.0..=1.0).contains(&k) {
                return Err(invalid("k", format!("must lie in [0, 1], got {k}")));
            }
        }
        if let DecayMode::P3Full { beta } = self.mode {
            if !(beta >= 0.0 && beta.is_finite()) {
                return Err(invalid("beta", format!("must be nonnegative, got {beta}")));
            }
        }
        if self.sigmas.len() < 2 || self.sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid("sigmas", "need at least two positive sampling times"));
        }
        check_sigma(self.dsigma)?;
        if !(self.window > 0.0 && self.window <= self.grid.half_width()) {
            return Err(invalid("window", format!("must lie in (0, L], got {}", self.window)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub name: String,
    pub sigma: Vec<f64>,
    pub norm: Vec<f64>,
    /// Slope of `ln norm` against `sigma`.
    pub fitted_rate: f64,
    pub fit_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub mode: DecayMode,
    pub alpha: f64,
    pub p: f64,
    pub weight: f64,
    pub predicted_rate: Option<f64>,
    pub curves: Vec<DecayCurve>,
    /// Samples dropped because their projection vanishes.
    pub skipped: Vec<String>,
}

impl DecayReport {
    pub fn max_fitted_rate(&self) -> f64 {
        self.curves.iter().map(|c| c.fitted_rate).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Slowest observed decay `c0 = -max fitted rate`.
    pub fn fitted_c0(&self) -> f64 {
        -self.max_fitted_rate()
    }

    /// Every fitted rate is at most `predicted + tol`; without a prediction,
    /// every rate is at most `-tol`.
    pub fn passes(&self, tol: f64) -> bool {
        if self.curves.is_empty() {
            return false;
        }
        match self.predicted_rate {
            Some(r) => self.max_fitted_rate() <= r + tol,
            None => self.fitted_c0() > tol,
        }
    }

    /// `sigma,norm,predicted_rate,fitted_rate` for one curve.
    pub fn write_curve_csv<W: Write>(&self, curve: &DecayCurve, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sigma,norm,predicted_rate,fitted_rate")?;
        let predicted = self.predicted_rate.unwrap_or(f64::NAN);
        for (s, n) in curve.sigma.iter().zip(&curve.norm) {
            writeln!(w, "{s},{n},{predicted},{}", curve.fitted_rate)?;
        }
        Ok(())
    }
}

fn window_norm(h: &GridFunction, weight: f64, window: f64) -> f64 {
    let grid = h.grid();
    h.values()
        .iter()
        .enumerate()
        .filter(|(i, _)| grid.node(*i).abs() <= window + 1e-12)
        .map(|(i, v)| v.abs() * bracket(grid.node(i)).powf(-weight))
        .fold(0.0, f64::max)
}

/// Propagates each projected sample and fits its weighted-norm decay rate.
pub fn verify_decay(cfg: &DecayConfig, samples: &[SampleFunction]) -> Result<DecayReport> {
    cfg.validate()?;
    let (alpha, p) = (cfg.alpha, cfg.p);
    let weight = cfg.mode.weight();
    let projector = Projector::new(cfg.grid, cfg.mode.projection(), alpha, true)?;
    let curves = map_slice(samples, cfg.exec, |s| -> Result<Option<DecayCurve>> {
        let raw = GridFunction::from_fn(cfg.grid, |z| s.eval(z));
        raw.check_finite()?;
        let h0 = projector.apply(&raw);
        let scale = window_norm(&raw, weight, cfg.window);
        if window_norm(&h0, weight, cfg.window) <= 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Ok(None);
        }
        let (sigma, norm) = match cfg.mode {
            DecayMode::P3Full { beta } => {
                frozen_trajectory(&h0, &projector, alpha, p, beta, cfg)?
            }
            _ => {
                let mut norms = Vec::with_capacity(cfg.sigmas.len());
                for &sg in &cfg.sigmas {
                    let h = mehler_h(&h0, alpha, p, sg, Execution::Sequential)?;
                    norms.push(window_norm(&h, weight, cfg.window));
                }
                (cfg.sigmas.clone(), norms)
            }
        };
        if norm.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(QuenchError::NonFinite { index: 0 });
        }
        let pts: Vec<(f64, f64)> = sigma.iter().zip(&norm).map(|(&s, &n)| (s, n.ln())).collect();
        let (slope, _, rms) = linear_fit(&pts);
        Ok(Some(DecayCurve {
            name: s.name.clone(),
            sigma,
            norm,
            fitted_rate: slope,
            fit_rms: rms,
        }))
    });
    let mut report = DecayReport {
        mode: cfg.mode,
        alpha,
        p,
        weight,
        predicted_rate: cfg.mode.predicted_rate(alpha, p),
        curves: Vec::new(),
        skipped: Vec::new(),
    };
    for (s, c) in samples.iter().zip(curves) {
        match c? {
            Some(c) => report.curves.push(c),
            None => report.skipped.push(s.name.clone()),
        }
    }
    Ok(report)
}

/// Lie steps `h -> P_3 e^{-V dsigma} e^{-dsigma L_alpha} h` with `beta` frozen.
fn frozen_trajectory(
    h0: &GridFunction,
    projector: &Projector,
    alpha: f64,
    p: f64,
    beta: f64,
    cfg: &DecayConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = FrozenOperatorSpec::with_potential(alpha, p, beta);
    let damping = h0.map_with_node(|z, _| (-spec.potential(z) * cfg.dsigma).exp());
    let targets: Vec<usize> = cfg
        .sigmas
        .iter()
        .map(|&s| ((s / cfg.dsigma).round() as usize).max(1))
        .collect();
    let last = *targets.iter().max().expect("validated non-empty");
    let mut h = h0.clone();
    let mut sigma = Vec::with_capacity(targets.len());
    let mut norm = Vec::with_capacity(targets.len());
    for step in 1..=last {
        let moved = mehler_h(&h, alpha, p, cfg.dsigma, Execution::Sequential)?;
        h = projector.apply(&moved.zip_with(&damping, |a, b| a * b)?);
        for &t in targets.iter().filter(|&&t| t == step) {
            sigma.push(t as f64 * cfg.dsigma);
            norm.push(window_norm(&h, 3.0, cfg.window));
        }
    }
    Ok((sigma, norm))
}

// ---------------------------------------------------------------------------
// Source and nonlinearity of the fluctuation equation

/// `F(a,b) = chi [Gamma1 + Gamma2 y^2/(1-p+b y^2) + F1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDecomposition {
    pub gamma1: f64,
    pub gamma2: f64,
    pub f1: GridFunction,
    /// `((1-p+b y^2)/(a+1/2))^{1/(1-p)} e^{-a y^2/4}/(1-p)`.
    pub chi: GridFunction,
    pub f: GridFunction,
}

pub fn gamma1(a: f64, b: f64, a_tau: f64, p: f64) -> f64 {
    a_tau / (a + 0.5) + a - 0.5 + 2.0 * b / (1.0 - p)
}

pub fn gamma2(a: f64, b: f64, b_tau: f64, p: f64) -> f64 {
    -b_tau - b * (a - 0.5 + 2.0 * b / (1.0 - p)) + 4.0 * p / (p - 1.0).powi(2) * b * b
}

pub fn source_decomposition(
    a: f64,
    b: f64,
    a_tau: f64,
    b_tau: f64,
    p: f64,
    grid: Grid,
) -> Result<SourceDecomposition> {
    check_p(p)?;
    let params = ProfileParams::new(a, b)?;
    let m = 1.0 - p;
    let g1 = gamma1(a, b, a_tau, p);
    let g2 = gamma2(a, b, b_tau, p);
    let f1 = GridFunction::from_fn(grid, |y| {
        let d = m + b * y * y;
        p / (m * m) * 4.0 * b.powi(3) * y.powi(4) / (d * d)
    });
    let chi = GridFunction::from_fn(grid, |y| {
        v_profile(params, p, y) * (-0.25 * a * y * y).exp() / m
    });
    let bracket_terms = f1.map_with_node(|y, f1| g1 + g2 * y * y / (m + b * y * y) + f1);
    let f = chi.zip_with(&bracket_terms, |c, t| c * t)?;
    Ok(SourceDecomposition { gamma1: g1, gamma2: g2, f1, chi, f })
}

/// `v = V_{a,b} + e^{a y^2/4} xi`, the ungauged field behind a fluctuation.
fn relative_fluctuation(a: f64, b: f64, xi: &GridFunction, p: f64) -> Result<(ProfileParams, Vec<f64>)> {
    check_p(p)?;
    let params = ProfileParams::new(a, b)?;
    xi.check_finite()?;
    let grid = xi.grid();
    let mut phi = Vec::with_capacity(xi.len());
    for (i, &x) in xi.values().iter().enumerate() {
        let y = grid.node(i);
        let vp = v_profile(params, p, y);
        let ph = x * (0.25 * a * y * y).exp() / vp;
        if !(ph > -1.0) {
            return Err(QuenchError::NonPositive { index: i, value: vp * (1.0 + ph) });
        }
        phi.push(ph);
    }
    Ok((params, phi))
}

/// `N = e^{-a y^2/4} V^p [1 + p phi - (1+phi)^p]` with `phi = e^{a y^2/4} xi/V`.
pub fn nonlinear_term(a: f64, b: f64, xi: &GridFunction, p: f64) -> Result<GridFunction> {
    let (params, phi) = relative_fluctuation(a, b, xi, p)?;
    let grid = *xi.grid();
    let values = phi
        .iter()
        .enumerate()
        .map(|(i, &ph)| {
            let y = grid.node(i);
            let log_pref = p * v_profile(params, p, y).ln() - 0.25 * a * y * y;
            log_pref.exp() * taylor_defect(ph, p)
        })
        .collect();
    GridFunction::new(grid, values)
}

/// `1 + p phi - (1+phi)^p`, accurate for small `phi`.
fn taylor_defect(phi: f64, p: f64) -> f64 {
    if phi.abs() < 1e-3 {
        // Series through phi^4.
        let c2 = p * (p - 1.0) / 2.0;
        let c3 = c2 * (p - 2.0) / 3.0;
        let c4 = c3 * (p - 3.0) / 4.0;
        -(phi * phi * (c2 + phi * (c3 + phi * c4)))
    } else {
        p * phi - (p * phi.ln_1p()).exp_m1()
    }
}

/// Fitted constant of `|N| <= C envelope`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearBound {
    pub constant: f64,
    /// Node where the ratio peaks.
    pub argmax: f64,
}

/// Envelope `e^{-a y^2/4} [ (1+beta y^2)^{-2/(1-p)} |e^{a y^2/4} xi|^2
/// + [p < -1] (1+beta y^2)^{-(2-p)/(1-p)} |e^{a y^2/4} xi|^{2-p} ]`.
pub fn nonlinear_bound(a: f64, b: f64, xi: &GridFunction, p: f64, beta: f64) -> Result<NonlinearBound> {
    let n = nonlinear_term(a, b, xi, p)?;
    let m = 1.0 - p;
    let grid = xi.grid();
    let mut best = NonlinearBound { constant: 0.0, argmax: 0.0 };
    for (i, (&x, &nv)) in xi.values().iter().zip(n.values()).enumerate() {
        let y = grid.node(i);
        let e = (0.25 * a * y * y).exp();
        let w = (x * e).abs();
        if w == 0.0 {
            continue;
        }
        let damp = 1.0 / (1.0 + beta * y * y);
        let mut env = damp.powf(2.0 / m) * w * w;
        if p < -1.0 {
            env += damp.powf((2.0 - p) / m) * w.powf(2.0 - p);
        }
        let ratio = nv.abs() * e / env;
        if ratio > best.constant {
            best = NonlinearBound { constant: ratio, argmax: y };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sup_diff(a: &GridFunction, b: &GridFunction) -> f64 {
        a.sub(b).unwrap().sup_norm()
    }

    fn fine() -> Grid {
        Grid::new(12.0, 2401).unwrap()
    }

    #[test]
    fn eigenvalue_examples() {
        assert_eq!(eigenvalue(0, 0.5, -1.0), -0.5);
        assert_eq!(eigenvalue(1, 0.5, -1.0), 0.0);
        assert_eq!(eigenvalue(2, 0.5, -1.0), 0.5);
        assert!(eigenpair(3, 0.5, -1.0, fine()).is_err());
    }

    #[test]
    fn eigenvectors_are_orthonormal() {
        let g = fine();
        let phis: Vec<_> = (0..3).map(|n| eigenpair(n, 0.5, -1.0, g).unwrap().1).collect();
        for i in 0..3 {
            for j in 0..3 {
                let ip = phis[i].inner_product(&phis[j]).unwrap();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((ip - target).abs() < 1e-8, "<phi{i},phi{j}> = {ip}");
            }
        }
    }

    #[test]
    fn spectral_residuals_at_fine_spacing() {
        let g = fine();
        assert!(g.spacing() <= 0.01 + 1e-15);
        for &(alpha, p) in &[(0.5, -1.0), (0.25, -3.0), (1.0, -0.5)] {
            let spec = FrozenOperatorSpec::plain(alpha, p);
            for n in 0..3 {
                let (lam, phi) = eigenpair(n, alpha, p, g).unwrap();
                let res = apply_L_alpha(&phi, &spec).unwrap().sub(&phi.scale(lam)).unwrap();
                assert!(res.l2_norm() <= 1e-4, "n={n} alpha={alpha}: {}", res.l2_norm());
            }
        }
    }

    #[test]
    fn operator_of_zero_is_zero() {
        let z = GridFunction::zeros(fine());
        let out = apply_L_alpha(&z, &FrozenOperatorSpec::with_potential(0.5, -1.0, 0.1)).unwrap();
        assert_eq!(out.sup_norm(), 0.0);
    }

    #[test]
    fn constant_potential_shifts_spectrum() {
        let g = fine();
        let (alpha, p) = (0.5, -1.0);
        let (lam, phi) = eigenpair(2, alpha, p, g).unwrap();
        let spec = FrozenOperatorSpec::with_potential(alpha, p, 0.0);
        let shift = 2.0 * p * alpha / (1.0 - p);
        let res = apply_L_alpha(&phi, &spec).unwrap().sub(&phi.scale(lam + shift)).unwrap();
        assert!(res.l2_norm() <= 1e-4);
    }

    #[test]
    fn mehler_ground_and_second_modes() {
        let g = Grid::new(16.0, 641).unwrap();
        for &(alpha, p) in &[(0.5, -1.0), (0.25, -3.0), (1.0, -0.5)] {
            for &sigma in &[0.1, 0.7, 2.0] {
                let phi0 = GridFunction::from_fn(g, |z| (-0.25 * alpha * z * z).exp());
                let out0 = mehler_apply(&phi0, alpha, p, sigma).unwrap();
                let want0 = phi0.scale((2.0 * alpha * sigma / (1.0 - p)).exp());
                assert!(sup_diff(&out0, &want0) < 1e-6, "phi0 {alpha} {sigma}");

                let f2 = GridFunction::from_fn(g, |z| (alpha * z * z - 1.0) * (-0.25 * alpha * z * z).exp());
                let out2 = mehler_apply(&f2, alpha, p, sigma).unwrap();
                let want2 = f2.scale((2.0 * p * alpha * sigma / (1.0 - p)).exp());
                assert!(sup_diff(&out2, &want2) < 1e-6, "phi2 {alpha} {sigma}");
            }
        }
    }

    #[test]
    fn mehler_rejects_nonpositive_time() {
        let g = Grid::new(8.0, 161).unwrap();
        let f = GridFunction::constant(g, 1.0);
        assert!(mehler_apply(&f, 0.5, -1.0, 0.0).is_err());
        assert!(mehler_apply(&f, 0.5, -1.0, -1.0).is_err());
    }

    #[test]
    fn mehler_semigroup() {
        let g = Grid::new(16.0, 641).unwrap();
        let (alpha, p) = (0.5, -1.0);
        let f = GridFunction::from_fn(g, |z| (1.0 + z.cos()) * (-0.3 * z * z).exp());
        let once = mehler_apply(&f, alpha, p, 1.0).unwrap();
        let twice = mehler_apply(&mehler_apply(&f, alpha, p, 0.3).unwrap(), alpha, p, 0.7).unwrap();
        assert!(sup_diff(&once, &twice) < 1e-6);
    }

    #[test]
    fn mehler_execution_paths_agree() {
        let g = Grid::new(10.0, 201).unwrap();
        let f = GridFunction::from_fn(g, |z| (-0.5 * z * z).exp() * (1.0 + z * z));
        let a = mehler_apply_with(&f, 0.5, -1.0, 0.4, Execution::Sequential).unwrap();
        let b = mehler_apply_with(&f, 0.5, -1.0, 0.4, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_examples() {
        let g = fine();
        let alpha = 0.5;
        let phi0 = eigenpair(0, alpha, -1.0, g).unwrap().1;
        let phi2 = eigenpair(2, alpha, -1.0, g).unwrap().1;
        assert!(project(&phi0, 1, alpha).unwrap().sup_norm() < 1e-8);
        assert!(sup_diff(&project(&phi2, 2, alpha).unwrap(), &phi2) < 1e-8);
        assert!(project(&phi2, 3, alpha).unwrap().sup_norm() < 1e-8);
        assert!(project(&phi0, 4, alpha).is_err());
    }

    #[test]
    fn h_form_projection_matches_g_form() {
        let g = Grid::new(14.0, 561).unwrap();
        let alpha = 0.5;
        let f = GridFunction::from_fn(g, |z| (1.0 + z * z) * (0.7 * z).cos() * (-0.25 * alpha * z * z).exp());
        let via_g = project(&f, 3, alpha).unwrap();
        let h = f.map_with_node(|z, v| v * (0.25 * alpha * z * z).exp());
        let via_h = project_h(&h, 3, alpha)
            .unwrap()
            .map_with_node(|z, v| v * (-0.25 * alpha * z * z).exp());
        assert!(sup_diff(&via_g, &via_h) < 1e-10);
    }

    #[test]
    fn weighted_smoothing_constant() {
        let g = Grid::new(24.0, 961).unwrap();
        for &alpha in &[0.25, 0.5, 1.0] {
            let p = -1.0;
            let bound = 2.0 * (1.0 / alpha + 1.0);
            for n in 0..=2 {
                let nf = n as f64;
                for s in default_samples(nf, alpha).iter().take(5) {
                    let h = GridFunction::from_fn(g, |z| s.eval(z));
                    let before = window_norm(&h, nf, 12.0);
                    for &sigma in &[0.05, 0.5, 2.0, 6.0] {
                        let out = mehler_h(&h, alpha, p, sigma, Execution::Sequential).unwrap();
                        let growth = (2.0 * alpha * sigma / (1.0 - p)).exp();
                        let c = window_norm(&out, nf, 12.0) / (growth * before);
                        assert!(c <= bound, "alpha={alpha} n={n} {}: C = {c}", s.name);
                    }
                }
            }
        }
    }

    #[test]
    fn decay_p2_on_hermite4() {
        let cfg = DecayConfig::new(DecayMode::P2Plain, 0.5, -1.0).unwrap();
        let samples = default_samples(2.0, 0.5);
        let h4 = samples.iter().filter(|s| s.name == "hermite4").cloned().collect::<Vec<_>>();
        let report = verify_decay(&cfg, &h4).unwrap();
        // 2 alpha p/(1-p) at alpha = 1/2, p = -1.
        assert_eq!(report.predicted_rate, Some(-0.5));
        // Pure n = 4 mode decays at -(4 alpha - 2 alpha/(1-p)) = -1.5.
        let r = report.curves[0].fitted_rate;
        assert!((r + 1.5).abs() < 1e-3, "{r}");
        assert!(r <= -0.20);
    }

    #[test]
    fn p1_prediction_example() {
        let m = DecayMode::P1Weighted { k: 1.0 };
        assert!((m.predicted_rate(0.5, -3.0).unwrap() + 0.25).abs() < 1e-15);
    }

    #[test]
    fn p3_with_zero_beta_matches_exact_propagator() {
        let (alpha, p) = (0.5, -1.0);
        let mut cfg = DecayConfig::new(DecayMode::P3Full { beta: 0.0 }, alpha, p).unwrap();
        cfg.sigmas = vec![1.0, 2.0, 3.0];
        let samples = default_samples(3.0, alpha);
        let report = verify_decay(&cfg, &samples).unwrap();
        // With beta = 0 the potential is the constant 2 p alpha/(1-p), which
        // commutes with L_alpha and P_3, so stepping is exact.
        let shift = 2.0 * p * alpha / (1.0 - p);
        let projector = Projector::new(cfg.grid, 3, alpha, true).unwrap();
        for (s, curve) in samples.iter().zip(&report.curves) {
            let h0 = projector.apply(&GridFunction::from_fn(cfg.grid, |z| s.eval(z)));
            for (&sg, &nm) in curve.sigma.iter().zip(&curve.norm) {
                let exact = mehler_h(&h0, alpha, p, sg, Execution::Sequential)
                    .unwrap()
                    .scale((-shift * sg).exp());
                let want = window_norm(&exact, 3.0, cfg.window);
                assert!((nm - want).abs() <= 1e-6 * want, "{} sigma={sg}: {nm} vs {want}", s.name);
            }
        }
        // Pure fourth mode: rate -(4 alpha - 2 alpha/(1-p)) - shift = -2 alpha.
        let h4 = report.curves.iter().find(|c| c.name == "hermite4").unwrap();
        assert!((h4.fitted_rate + 2.0 * alpha).abs() < 1e-3);
    }

    #[test]
    fn source_vanishes_at_static_profile() {
        let g = Grid::new(10.0, 201).unwrap();
        let s = source_decomposition(0.5, 0.0, 0.0, 0.0, -1.0, g).unwrap();
        assert_eq!(s.gamma1, 0.0);
        assert_eq!(s.gamma2, 0.0);
        assert_eq!(s.f1.sup_norm(), 0.0);
        assert_eq!(s.f.sup_norm(), 0.0);
    }

    #[test]
    fn gamma2_vanishes_on_leading_order_law() {
        let (p, b) = (-1.0f64, 0.01);
        let a = 0.5 - 2.0 * b / (1.0 - p);
        let b_tau = 4.0 * p / (p - 1.0).powi(2) * b * b;
        assert!(gamma2(a, b, b_tau, p).abs() < 1e-18);
    }

    fn chi_f1_slope(bs: &[f64], p: f64) -> f64 {
        let g = Grid::new(60.0, 2401).unwrap();
        let pts: Vec<(f64, f64)> = bs
            .iter()
            .map(|&b| {
                let s = source_decomposition(0.5, b, 0.0, 0.0, p, g).unwrap();
                let prod = s.chi.zip_with(&s.f1, |c, f| c * f).unwrap();
                (b.ln(), prod.sup_norm().ln())
            })
            .collect();
        linear_fit(&pts).0
    }

    #[test]
    fn chi_f1_scales_cubically() {
        for &p in &[-0.5, -1.0, -3.0] {
            let slope = chi_f1_slope(&[1e-4, 2e-4, 5e-4], p);
            assert!((slope - 3.0).abs() < 0.1, "p={p}: slope {slope}");
        }
        // Pre-asymptotic at moderate b: b y^2 is O(1) where y^4 e^{-y^2/8} peaks.
        let moderate = chi_f1_slope(&[0.01, 0.02, 0.05], -1.0);
        assert!(moderate > 2.5 && moderate < 3.0, "slope {moderate}");
    }

    #[test]
    fn nonlinear_term_vanishes_at_profile() {
        let g = Grid::new(10.0, 201).unwrap();
        let n = nonlinear_term(0.5, 0.05, &GridFunction::zeros(g), -1.0).unwrap();
        assert_eq!(n.sup_norm(), 0.0);
    }

    #[test]
    fn nonlinear_term_rejects_nonpositive_field() {
        let g = Grid::new(4.0, 81).unwrap();
        let xi = GridFunction::constant(g, -10.0);
        assert!(matches!(
            nonlinear_term(0.5, 0.05, &xi, -1.0),
            Err(QuenchError::NonPositive { .. })
        ));
    }

    fn shape(g: Grid, a: f64) -> GridFunction {
        GridFunction::from_fn(g, |y| (1.0 - 0.3 * y * y) * (-0.25 * a * y * y - 0.05 * y * y).exp())
    }

    #[test]
    fn nonlinear_term_is_quadratic() {
        let g = Grid::new(12.0, 481).unwrap();
        let (a, b) = (0.48, 0.03);
        for &p in &[-0.5, -1.0] {
            let psi = shape(g, a);
            let pts: Vec<(f64, f64)> = [1e-2, 1e-3, 1e-4]
                .iter()
                .map(|&eps| {
                    let n = nonlinear_term(a, b, &psi.scale(eps), p).unwrap();
                    (eps.ln(), n.sup_norm().ln())
                })
                .collect();
            let (slope, _, _) = linear_fit(&pts);
            assert!((slope - 2.0).abs() < 0.1, "p={p}: slope {slope}");
        }
    }

    /// `xi` whose relative size `e^{a y^2/4} xi/V` is exactly `phi`.
    fn xi_from_phi(g: Grid, a: f64, b: f64, p: f64, phi: impl Fn(f64) -> f64) -> GridFunction {
        let params = ProfileParams::new(a, b).unwrap();
        GridFunction::from_fn(g, |y| phi(y) * v_profile(params, p, y) * (-0.25 * a * y * y).exp())
    }

    #[test]
    fn two_term_envelope_holds_for_large_fluctuations() {
        let g = Grid::new(12.0, 481).unwrap();
        let (a, b, p) = (0.48, 0.03, -3.0);
        // Sign-changing, bounded below by -1/2 as the lower bound on v allows.
        for &eps in &[0.01, 0.05, 0.1, 0.2, 0.25] {
            let xi = xi_from_phi(g, a, b, p, |y| eps * (1.0 - 0.3 * y * y) * (-0.05 * y * y).exp());
            let bound = nonlinear_bound(a, b, &xi, p, b).unwrap();
            assert!(bound.constant < 10.0, "eps={eps}: C = {}", bound.constant);
        }
        // Large positive fluctuations.
        let mut sizes = Vec::new();
        for &eps in &[0.5, 1.0, 5.0, 20.0, 50.0] {
            let xi = xi_from_phi(g, a, b, p, |y| eps * (-0.1 * y * y).exp());
            let bound = nonlinear_bound(a, b, &xi, p, b).unwrap();
            assert!(bound.constant < 10.0, "eps={eps}: C = {}", bound.constant);
            sizes.push((eps.ln(), nonlinear_term(a, b, &xi, p).unwrap().sup_norm().ln()));
        }
        let (slope, _, _) = linear_fit(&sizes);
        assert!(slope <= 2.0 - p, "growth exponent {slope}");
    }

    proptest! {
        #[test]
        fn source_reassembles(a in 0.3f64..0.7, b in 0.0f64..0.2, at in -0.1f64..0.1,
                              bt in -0.1f64..0.1, p in -4.0f64..-0.1) {
            let g = Grid::new(10.0, 101).unwrap();
            let s = source_decomposition(a, b, at, bt, p, g).unwrap();
            let m = 1.0 - p;
            for (i, &f) in s.f.values().iter().enumerate() {
                let y = g.node(i);
                let want = s.chi.values()[i]
                    * (s.gamma1 + s.gamma2 * y * y / (m + b * y * y) + s.f1.values()[i]);
                prop_assert!((f - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }

        #[test]
        fn projection_is_idempotent(c in prop::collection::vec(-1.0f64..1.0, 4), n in 1usize..=3) {
            let g = Grid::new(12.0, 241).unwrap();
            let f = GridFunction::from_fn(g, |z| {
                (c[0] + c[1] * z + c[2] * z * z + c[3] * z.sin()) * (-0.2 * z * z).exp()
            });
            let once = project(&f, n, 0.5).unwrap();
            let twice = project(&once, n, 0.5).unwrap();
            prop_assert!(sup_diff(&once, &twice) <= 1e-10);
        }

        #[test]
        fn mehler_preserves_positivity(w in 0.05f64..2.0, c in -3.0f64..3.0, sigma in 0.01f64..3.0) {
            let g = Grid::new(10.0, 201).unwrap();
            let f = GridFunction::from_fn(g, |z| (-w * (z - c) * (z - c)).exp());
            let out = mehler_apply(&f, 0.5, -1.0, sigma).unwrap();
            prop_assert!(out.min() >= 0.0);
        }
    }
}
