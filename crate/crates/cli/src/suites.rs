//! Invariant suites run by `verify`. Every check yields a named, thresholded
//! result; a check that cannot run at all is reported as a failure.

use crate::config::RunConfig;
use crate::CliError;
use quench_core::direct::{duhamel_iterate, run_to_quench, DirectConfig};
use quench_core::linops::{
    apply_L_alpha, default_samples, eigenpair, mehler_apply, mehler_apply_with, verify_decay, DecayConfig, DecayMode,
    FrozenOperatorSpec,
};
use quench_core::model::{
    barrier_constant, beta_of_tau, comparison_envelope, generate_initial_data, normalize_initial_data, q_exponent,
    quench_time_hom, v_profile,
};
use quench_core::splitting::{extract_params, g_jacobian, multi_start, G_map};
use quench_core::{bracket, Execution, Extension, Grid, GridFunction, InitialDataSpec, ProfileParams, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Spectral,
    Splitting,
    Heat,
    Model,
}

impl std::str::FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> std::result::Result<Self, CliError> {
        match s {
            "spectral" => Ok(Suite::Spectral),
            "splitting" => Ok(Suite::Splitting),
            "heat" => Ok(Suite::Heat),
            "model" => Ok(Suite::Model),
            other => Err(CliError::Config(format!(
                "unknown suite `{other}` (expected spectral, splitting, heat or model)"
            ))),
        }
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Suite::Spectral => "spectral",
            Suite::Splitting => "splitting",
            Suite::Heat => "heat",
            Suite::Model => "model",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

/// `value <= threshold`.
fn at_most(name: &str, value: f64, threshold: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: value <= threshold,
        value,
        threshold,
        detail: format!("{value:e} against the bound {threshold:e}"),
    }
}

/// `value >= threshold`.
fn at_least(name: &str, value: f64, threshold: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: value >= threshold,
        value,
        threshold,
        detail: format!("{value:e} against the floor {threshold:e}"),
    }
}

fn errored(name: &str, err: impl std::fmt::Display) -> CheckResult {
    CheckResult { name: name.into(), passed: false, value: f64::NAN, threshold: f64::NAN, detail: err.to_string() }
}

/// Runs `f`; an error becomes a failed check.
fn guarded(name: &str, f: impl FnOnce() -> Result<CheckResult>) -> CheckResult {
    f().unwrap_or_else(|e| errored(name, e))
}

pub fn run(suite: Suite, cfg: &RunConfig) -> Vec<CheckResult> {
    match suite {
        Suite::Spectral => spectral(cfg),
        Suite::Splitting => splitting(cfg),
        Suite::Heat => heat(cfg),
        Suite::Model => model(cfg),
    }
}

fn sup_diff(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    Ok(f.sub(g)?.sup_norm())
}

// ---------------------------------------------------------------------------

const SPECTRAL_CASES: [(f64, f64); 3] = [(0.5, -1.0), (0.25, -3.0), (1.0, -0.5)];

pub fn spectral(cfg: &RunConfig) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(guarded("eigen-residual", || {
        let g = Grid::new(12.0, 2401)?;
        let mut worst: f64 = 0.0;
        for &(alpha, p) in &SPECTRAL_CASES {
            let spec = FrozenOperatorSpec::plain(alpha, p);
            for n in 0..3 {
                let (lam, phi) = eigenpair(n, alpha, p, g)?;
                worst = worst.max(apply_L_alpha(&phi, &spec)?.sub(&phi.scale(lam))?.l2_norm());
            }
        }
        Ok(at_most("eigen-residual", worst, 1e-4))
    }));
    out.push(guarded("mehler-modes", || {
        let g = Grid::new(16.0, 641)?;
        let mut worst: f64 = 0.0;
        for &(alpha, p) in &SPECTRAL_CASES {
            for &sigma in &[0.1, 0.7, 2.0] {
                let phi0 = GridFunction::from_fn(g, |z| (-0.25 * alpha * z * z).exp());
                let want0 = phi0.scale((2.0 * alpha * sigma / (1.0 - p)).exp());
                worst = worst.max(sup_diff(&mehler_apply(&phi0, alpha, p, sigma)?, &want0)?);
                let phi2 = GridFunction::from_fn(g, |z| (alpha * z * z - 1.0) * (-0.25 * alpha * z * z).exp());
                let want2 = phi2.scale((2.0 * p * alpha * sigma / (1.0 - p)).exp());
                worst = worst.max(sup_diff(&mehler_apply(&phi2, alpha, p, sigma)?, &want2)?);
            }
        }
        Ok(at_most("mehler-modes", worst, 1e-6))
    }));
    out.push(guarded("mehler-semigroup", || {
        let g = Grid::new(16.0, 641)?;
        let mut worst: f64 = 0.0;
        for &(alpha, p) in &SPECTRAL_CASES {
            let f = GridFunction::from_fn(g, |z| (1.0 + z.cos()) * (-0.3 * z * z).exp());
            let once = mehler_apply(&f, alpha, p, 1.0)?;
            let twice = mehler_apply(&mehler_apply(&f, alpha, p, 0.3)?, alpha, p, 0.7)?;
            worst = worst.max(sup_diff(&once, &twice)?);
        }
        Ok(at_most("mehler-semigroup", worst, 1e-6))
    }));
    out.push(guarded("mehler-execution-paths", || {
        let g = Grid::new(10.0, 201)?;
        let f = GridFunction::from_fn(g, |z| (-0.5 * z * z).exp() * (1.0 + z * z));
        let a = mehler_apply_with(&f, 0.5, cfg.p, 0.4, Execution::Sequential)?;
        let b = mehler_apply_with(&f, 0.5, cfg.p, 0.4, Execution::Parallel)?;
        Ok(at_most("mehler-execution-paths", sup_diff(&a, &b)?, 0.0))
    }));
    let alpha = 0.5;
    let modes = [
        DecayMode::P2Plain,
        DecayMode::P1Weighted { k: 0.0 },
        DecayMode::P1Weighted { k: 0.5 },
        DecayMode::P1Weighted { k: 1.0 },
        DecayMode::P3Full { beta: 0.0 },
    ];
    for mode in modes {
        let name = format!("decay-{mode}");
        out.push(guarded(&name, || {
            let dcfg = DecayConfig::new(mode, alpha, cfg.p)?;
            let report = verify_decay(&dcfg, &default_samples(mode.weight(), alpha))?;
            Ok(match report.predicted_rate {
                Some(rate) => at_most(&name, report.max_fitted_rate(), rate + 0.05),
                None => at_least(&name, report.fitted_c0(), 0.05),
            })
        }));
    }
    out
}

// ---------------------------------------------------------------------------

/// Below this the truncated Gaussian tail is invisible in double precision.
pub const QUADRATURE_TOLERANCE: f64 = 1e-12;
/// Smallest `a` the suite exercises.
const A_MIN: f64 = 0.25;

pub fn splitting(cfg: &RunConfig) -> Vec<CheckResult> {
    let p = cfg.p;
    let mut out = Vec::new();
    // The weights decay like e^{-a y^2/2}; the data grow at most like y^2.
    let tail = (-0.5 * A_MIN * cfg.l_y * cfg.l_y).exp() * bracket(cfg.l_y).powi(4);
    let mut quad = at_most("quadrature-tolerance", tail, QUADRATURE_TOLERANCE);
    if !quad.passed {
        quad.detail = format!(
            "Gaussian tail {tail:e} at |y| = l_y = {} exceeds the quadrature tolerance {QUADRATURE_TOLERANCE:e}; increase l_y",
            cfg.l_y
        );
    }
    out.push(quad);

    let grid = match Grid::new(cfg.l_y, cfg.n_y()) {
        Ok(g) => g,
        Err(e) => {
            out.push(errored("grid", e));
            return out;
        }
    };
    let profile = |a: f64, b: f64| -> Result<GridFunction> {
        let prm = ProfileParams::new(a, b)?;
        Ok(GridFunction::from_even_fn(grid, |y| v_profile(prm, p, y)))
    };
    let box_points: Vec<(f64, f64)> =
        (0..5).flat_map(|i| (0..5).map(move |j| (A_MIN + 0.1875 * i as f64, 0.025 * j as f64))).collect();

    out.push(guarded("fixed-points", || {
        let mut worst: f64 = 0.0;
        for &(a, b) in &box_points {
            let s = extract_params(&profile(a, b)?, (a * 1.05, b + 0.01), p)?;
            worst = worst.max((s.a - a).abs()).max((s.b - b).abs());
        }
        Ok(at_most("fixed-points", worst, 1e-9))
    }));

    out.push(guarded("jacobian", || {
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for &(a, b) in box_points.iter().filter(|(_, b)| *b > 0.0) {
            let v = profile(a * 1.02, b * 0.9)?;
            let jac = g_jacobian((a, b), &v, p)?.total();
            for k in 0..2 {
                let shift = |s: f64| if k == 0 { (a + s, b) } else { (a, b + s) };
                let (gh, gl) = (G_map(shift(eps), &v, p)?, G_map(shift(-eps), &v, p)?);
                for i in 0..2 {
                    let fd = (gh[i] - gl[i]) / (2.0 * eps);
                    worst = worst.max((fd - jac[i][k]).abs() / jac[i][k].abs().max(1e-3));
                }
            }
        }
        Ok(at_most("jacobian", worst, 1e-6))
    }));

    out.push(guarded("uniqueness", || {
        let (a, b) = (0.5, 0.04);
        let bump = GridFunction::from_fn(grid, |y| 5e-3 * (-y * y / 6.0).exp() * (0.4 * y).cos());
        let v = profile(a, b)?.add(&bump)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let starts: Vec<(f64, f64)> = (0..100)
            .map(|_| (a + rng.random_range(-0.05..0.05), (b + rng.random_range(-0.03..0.03)).max(0.0)))
            .collect();
        let roots = multi_start(&v, &starts, p, Execution::Parallel).into_iter().collect::<Result<Vec<_>>>()?;
        let spread = |f: &dyn Fn(&quench_core::splitting::SplitResult) -> f64| {
            let vals: Vec<f64> = roots.iter().map(f).collect();
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        Ok(at_most("uniqueness", spread(&|s| s.a).max(spread(&|s| s.b)), 1e-8))
    }));

    out.push(guarded("orthogonality", || {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let a = rng.random_range(0.3..0.9);
            let b = rng.random_range(0.005..0.09);
            let amp = rng.random_range(-0.02..0.02);
            let width = rng.random_range(2.0..12.0);
            let bump = GridFunction::from_fn(grid, |y| amp * (-y * y / width).exp());
            let s = extract_params(&profile(a, b)?.add(&bump)?, (a, b), p)?;
            let scale = s.xi.l2_norm().max(1.0);
            worst = worst.max(s.residual_0.abs() / scale).max(s.residual_2.abs() / scale);
        }
        Ok(at_most("orthogonality", worst, 1e-10))
    }));
    out
}

// ---------------------------------------------------------------------------

pub fn heat(cfg: &RunConfig) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let grid = || Grid::new(20.0, 801);
    out.push(guarded("second-moment", || {
        let f = GridFunction::from_fn(grid()?, |x| x * x);
        let mut worst: f64 = 0.0;
        for &t in &[0.05, 0.2, 0.5] {
            let g = f.heat_convolve_with(t, Extension::Linear, Execution::Sequential)?;
            for (x, v) in g.grid().nodes().iter().zip(g.values()) {
                if x.abs() <= 5.0 {
                    worst = worst.max((v - (x * x + 2.0 * t)).abs());
                }
            }
        }
        Ok(at_most("second-moment", worst, 1e-6))
    }));
    out.push(guarded("gaussian-propagation", || {
        let g = grid()?;
        let t: f64 = 0.7;
        let f = GridFunction::from_fn(g, |x| (-x * x / 4.0).exp());
        let exact = GridFunction::from_fn(g, |x| (1.0 + t).powf(-0.5) * (-x * x / (4.0 * (1.0 + t))).exp());
        Ok(at_most("gaussian-propagation", sup_diff(&f.heat_convolve(t)?, &exact)?, 1e-8))
    }));
    out.push(guarded("weighted-growth", || {
        let g = GridFunction::from_fn(Grid::new(40.0, 1601)?, |x| bracket(x).powi(2) * (0.7 * x).cos());
        let base = g.weighted_sup_norm(2.0, 0.0)?;
        let mut worst = f64::NEG_INFINITY;
        for &t in &[0.01, 0.1, 0.5, 1.0] {
            let n = g.heat_convolve(t)?.weighted_sup_norm(2.0, 0.0)?;
            worst = worst.max((n / base - 1.0) / t);
        }
        Ok(at_most("weighted-growth", worst, 2.0 + 1e-9))
    }));
    out.push(guarded("trapezoid-order", || {
        let err = |n| -> Result<f64> {
            let f = GridFunction::from_fn(Grid::new(10.0, n)?, |x| (-x * x).exp() * x.abs());
            Ok((f.integral() - 1.0).abs())
        };
        let order = (err(201)? / err(401)?).log2();
        Ok(at_least("trapezoid-order", order, 1.9))
    }));
    out.push(guarded("positivity-contraction", || {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let floor = rng.random_range(0.1..3.0);
            let amp = rng.random_range(0.0..1.0);
            let freq = rng.random_range(0.1..2.0);
            let t = rng.random_range(0.001..1.0);
            let f = GridFunction::from_fn(grid()?, |x| floor + amp * (1.0 + (freq * x).sin()) * (-x * x / 20.0).exp());
            let g = f.heat_convolve(t)?;
            worst = worst.max(floor - g.min()).max(g.sup_norm() - f.sup_norm());
        }
        Ok(at_most("positivity-contraction", worst, 1e-10))
    }));
    out.push(guarded("execution-paths", || {
        let f = GridFunction::from_fn(grid()?, |x| 1.0 + 0.5 * (0.8 * x).cos());
        let s = f.heat_convolve_with(0.3, Extension::Constant, Execution::Sequential)?;
        let q = f.heat_convolve_with(0.3, Extension::Constant, Execution::Parallel)?;
        Ok(at_most("execution-paths", sup_diff(&s, &q)?, 0.0))
    }));
    out.push(guarded("duhamel-vs-imex", || {
        let (rel, _) = duhamel_cross_check()?;
        Ok(at_most("duhamel-vs-imex", rel, 1e-3))
    }));
    out
}

/// Fixed-point and IMEX solutions at `t = 0.05` from the profile
/// `a = 1/2, b = 0.05` at `p = -1`: (relative sup difference, Duhamel field).
pub fn duhamel_cross_check() -> Result<(f64, GridFunction)> {
    let g = Grid::new(30.0, 1201)?;
    let prm = ProfileParams::new(0.5, 0.05)?;
    let u0 = GridFunction::from_even_fn(g, |x| v_profile(prm, -1.0, x));
    let t = 0.05;
    let duhamel = duhamel_iterate(&u0, -1.0, t, 40, 30)?;
    let cfg = DirectConfig { t_max: t, dt_max: 2.5e-4, ..Default::default() };
    let imex = run_to_quench(&u0, &cfg)?.last().u.clone();
    Ok((duhamel.sub(&imex)?.sup_norm() / imex.sup_norm(), duhamel))
}

// ---------------------------------------------------------------------------

/// Homogeneous run from `u0 = 1` at `p = -1`: (worst relative error of
/// `u_min` against `(1 - 2t)^{1/2}` while `u >= 0.05`, estimated `t*`).
pub fn homogeneous_oracle() -> Result<(f64, f64)> {
    let u0 = GridFunction::constant(Grid::new(10.0, 201)?, 1.0);
    let trace = run_to_quench(&u0, &DirectConfig::default())?;
    let mut worst: f64 = 0.0;
    for s in trace.samples.iter().take_while(|s| s.u_min >= 0.05) {
        let exact = (1.0 - 2.0 * s.t).sqrt();
        worst = worst.max((s.u_min - exact).abs() / exact);
    }
    let t_star = trace.quench_estimate.map_or(f64::NAN, |e| e.t_star);
    Ok((worst, t_star))
}

pub fn model(cfg: &RunConfig) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(guarded("q-exponent", || {
        let err = (q_exponent(-1.0)? - 1.0).abs() + (q_exponent(-3.0)? - 0.625).abs() + (q_exponent(-0.5)? - 1.0).abs();
        Ok(at_most("q-exponent", err, 1e-15))
    }));
    match homogeneous_oracle() {
        Ok((worst, t_star)) => {
            out.push(at_most("homogeneous-profile", worst, 1e-4));
            out.push(at_most("homogeneous-quench-time", (t_star - 0.5).abs(), 1e-4));
        }
        Err(e) => out.push(errored("homogeneous-oracle", e)),
    }
    out.push(guarded("quench-time-law", || {
        let mut worst: f64 = 0.0;
        for &p in &[-0.5, -2.0, -3.0] {
            let u0 = GridFunction::constant(Grid::new(10.0, 201)?, 1.0);
            let est = run_to_quench(&u0, &DirectConfig { p, ..Default::default() })?.quench_estimate;
            let t = est.map_or(f64::NAN, |e| e.t_star);
            worst = worst.max((t - quench_time_hom(1.0, p)?).abs());
        }
        Ok(at_most("quench-time-law", worst, 1e-4))
    }));
    out.push(guarded("beta-law", || {
        // beta' = (4p/(p-1)^2) beta^2.
        let (b0, p) = (cfg.b0.max(1e-3), cfg.p);
        let kappa = 4.0 * p / (p - 1.0).powi(2);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for &tau in &[0.5, 5.0, 30.0] {
            let d = (beta_of_tau(b0, p, tau + h)? - beta_of_tau(b0, p, tau - h)?) / (2.0 * h);
            let beta = beta_of_tau(b0, p, tau)?;
            worst = worst.max((d - kappa * beta * beta).abs() / (beta * beta));
        }
        Ok(at_most("beta-law", worst, 1e-6))
    }));
    let spec = InitialDataSpec {
        b0: cfg.b0,
        c0: cfg.c0,
        delta0: cfg.delta0,
        perturbation: cfg.perturbation,
        lambda0: cfg.lambda0,
    };
    out.push(guarded("initial-data-above-envelope", || {
        let u0 = generate_initial_data(&spec, cfg.p, Grid::new(cfg.l_y, cfg.n_y())?)?;
        let slack = u0
            .grid()
            .nodes()
            .iter()
            .zip(u0.values())
            .map(|(&x, &u)| u - comparison_envelope(x, cfg.b0, cfg.c0, cfg.b0, cfg.p))
            .fold(f64::INFINITY, f64::min);
        Ok(at_least("initial-data-above-envelope", slack, 0.0))
    }));
    out.push(guarded("normalised-barrier", || {
        let u0 = generate_initial_data(&spec, cfg.p, Grid::new(cfg.l_y, cfg.n_y())?)?;
        let data = normalize_initial_data(&u0, cfg.b0, cfg.c0, cfg.delta0, cfg.p)?;
        let prof = data.profile(cfg.p)?;
        Ok(at_most("normalised-barrier", (barrier_constant(data.beta, prof.c(), cfg.p) - 1.0).abs(), 1e-12))
    }));
    out.push(guarded("scaling-invariance", || {
        let (defect, disc) = scaling_defect()?;
        Ok(at_most("scaling-invariance", defect, 10.0 * disc))
    }));
    out
}

/// Direct solve of `u` and of `2 u(x/2, t/4)` at `p = -1`: (scaling defect,
/// discretisation error from one refinement).
fn scaling_defect() -> Result<(f64, f64)> {
    let p = -1.0;
    let lambda: f64 = 2.0;
    let bump = |g: Grid| GridFunction::from_fn(g, |x| 0.8 + 0.6 * (1.0 - (-x * x / 2.0).exp()));
    let solve = |u0: &GridFunction, dt_max: f64, t: f64| -> Result<GridFunction> {
        let cfg = DirectConfig { p, dt_max, t_max: t, stop_floor: 1e-9, sample_stride: usize::MAX, ..Default::default() };
        Ok(run_to_quench(u0, &cfg)?.last().u.clone())
    };
    let grid = Grid::new(10.0, 401)?;
    let t = 0.15;
    let u0 = bump(grid);
    let u = solve(&u0, 2e-3, t)?;
    let s = lambda.powf(2.0 / (1.0 - p));
    let big = grid.dilate(lambda)?;
    let half = big.nodes()[big.center()..]
        .iter()
        .map(|&x| u0.interpolate(x / lambda).map(|v| s * v))
        .collect::<Result<Vec<_>>>()?;
    let w0 = GridFunction::from_half(big, &half)?;
    let w = solve(&w0, 2e-3 * lambda * lambda, lambda * lambda * t)?.scale(1.0 / s);
    let defect = (0..grid.len()).map(|i| (w.values()[i] - u.values()[i]).abs()).fold(0.0, f64::max);
    let u_fine = solve(&bump(Grid::new(10.0, 801)?), 5e-4, t)?;
    let disc = (0..grid.len()).map(|i| (u_fine.values()[2 * i] - u.values()[i]).abs()).fold(0.0, f64::max);
    Ok((defect, disc))
}
