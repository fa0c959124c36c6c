//! Physical-space integration of `u_t = u_xx - u^p` up to quenching, and a
//! Duhamel fixed-point integrator used to cross-validate it.
//!
//! The IMEX step applies the exact flow of the reaction `u' = -u^p` node by node
//! and then a backward-Euler diffusion step. The far-field boundary continues
//! `log u` linearly: the ghost value beyond `|x| = L` is `u_M * (u_M / u_{M-1})`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, QuenchError, Result};
use crate::grid::{solve_tridiagonal, Extension, GridFunction};
use crate::model::check_p;
use crate::par::Execution;

/// Exact reaction flow over `dt`; fails if any node would reach zero.
fn reaction_flow(u: &[f64], dt: f64, p: f64) -> Result<Vec<f64>> {
    let m = 1.0 - p;
    u.iter()
        .enumerate()
        .map(|(index, &v)| {
            let s = v.powf(m) - m * dt;
            if s > 0.0 {
                Ok(s.powf(1.0 / m))
            } else {
                Err(QuenchError::QuenchCrossing { dt, index })
            }
        })
        .collect()
}

/// Backward-Euler diffusion on the nonnegative half, reflected at the origin.
fn implicit_diffusion_half(half: &[f64], r: f64) -> Result<Vec<f64>> {
    let n = half.len();
    let mut lower = vec![-r; n];
    let mut diag = vec![1.0 + 2.0 * r; n];
    let mut upper = vec![-r; n];
    upper[0] = -2.0 * r;
    lower[0] = 0.0;
    let rho = half[n - 1] / half[n - 2];
    diag[n - 1] = 1.0 + 2.0 * r - r * rho;
    upper[n - 1] = 0.0;
    solve_tridiagonal(&lower, &diag, &upper, half).ok_or_else(|| QuenchError::SolverAbort {
        t: f64::NAN,
        reason: format!("singular diffusion system (r = {r:e}, boundary ratio {rho})"),
    })
}

/// One IMEX step of size `dt` for an even, positive `u`.
pub fn step_imex(u: &GridFunction, dt: f64, p: f64) -> Result<GridFunction> {
    check_p(p)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    u.check_positive()?;
    u.check_even()?;
    let grid = *u.grid();
    if grid.len() < 5 {
        return Err(invalid("grid", "direct solver needs at least 5 nodes"));
    }
    let reacted = reaction_flow(u.half(), dt, p)?;
    let r = dt / grid.spacing().powi(2);
    let diffused = implicit_diffusion_half(&reacted, r)?;
    let out = GridFunction::from_half(grid, &diffused)?;
    out.check_finite()?;
    if let Some(index) = out.half().iter().position(|&v| v <= 0.0) {
        return Err(QuenchError::QuenchCrossing {
            dt,
            index: index + grid.center(),
        });
    }
    Ok(out)
}

/// Largest step allowed by the reaction horizon: `safety * u_min^{1-p}/(1-p)`.
pub fn reaction_horizon_dt(u_min: f64, p: f64, safety: f64) -> f64 {
    safety * u_min.powf(1.0 - p) / (1.0 - p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectConfig {
    pub p: f64,
    /// Fraction of the local homogeneous quench horizon used per step.
    pub dt_safety: f64,
    pub dt_max: f64,
    /// Stop once `u_min < stop_floor * min u0`.
    pub stop_floor: f64,
    pub t_max: f64,
    /// Record every `sample_stride`-th step (the final state is always recorded).
    pub sample_stride: usize,
}

impl Default for DirectConfig {
    fn default() -> Self {
        Self {
            p: -1.0,
            dt_safety: 0.1,
            dt_max: 1e-3,
            stop_floor: 1e-3,
            t_max: 1e3,
            sample_stride: 1,
        }
    }
}

impl DirectConfig {
    pub fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        if !(self.dt_safety > 0.0 && self.dt_safety <= 1.0) {
            return Err(invalid("dt_safety", format!("must lie in (0, 1], got {}", self.dt_safety)));
        }
        if !(self.dt_max > 0.0) {
            return Err(invalid("dt_max", format!("must be positive, got {}", self.dt_max)));
        }
        if !(self.stop_floor > 0.0 && self.stop_floor < 1.0) {
            return Err(invalid("stop_floor", format!("must lie in (0, 1), got {}", self.stop_floor)));
        }
        if !(self.t_max > 0.0) {
            return Err(invalid("t_max", format!("must be positive, got {}", self.t_max)));
        }
        if self.sample_stride == 0 {
            return Err(invalid("sample_stride", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectSample {
    pub t: f64,
    pub u_min: f64,
    pub u: GridFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuenchEstimate {
    pub t_star: f64,
    /// RMS residual of the linear fit, relative to the fitted range.
    pub relative_residual: f64,
    pub window: usize,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectTrace {
    pub samples: Vec<DirectSample>,
    /// True when the run stopped because `u_min` fell below the floor.
    pub reached_floor: bool,
    pub steps: usize,
    pub quench_estimate: Option<QuenchEstimate>,
}

impl DirectTrace {
    pub fn last(&self) -> &DirectSample {
        self.samples.last().expect("trace always holds the initial sample")
    }
}

/// Mutable integrator state for one run.
#[derive(Debug, Clone)]
pub struct DirectSolver {
    u: GridFunction,
    t: f64,
    cfg: DirectConfig,
}

impl DirectSolver {
    pub fn new(u0: GridFunction, cfg: DirectConfig) -> Result<Self> {
        cfg.validate()?;
        u0.check_finite()?;
        u0.check_positive()?;
        u0.check_even()?;
        Ok(Self { u: u0, t: 0.0, cfg })
    }

    pub fn u(&self) -> &GridFunction {
        &self.u
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// Adaptive step: `min(dt_max, safety * u_min^{1-p}/(1-p))`.
    pub fn next_dt(&self) -> f64 {
        reaction_horizon_dt(self.u.min(), self.cfg.p, self.cfg.dt_safety).min(self.cfg.dt_max)
    }

    /// Advances by `dt`, halving on a quench crossing (at most 30 times).
    pub fn step(&mut self, dt: f64) -> Result<f64> {
        let mut dt = dt;
        for _ in 0..30 {
            match step_imex(&self.u, dt, self.cfg.p) {
                Ok(u) => {
                    self.u = u;
                    self.t += dt;
                    return Ok(dt);
                }
                Err(QuenchError::QuenchCrossing { .. }) => dt *= 0.5,
                Err(QuenchError::SolverAbort { reason, .. }) => {
                    return Err(QuenchError::SolverAbort { t: self.t, reason })
                }
                Err(e) => return Err(e),
            }
        }
        Err(QuenchError::SolverAbort {
            t: self.t,
            reason: "step size underflow near quench".into(),
        })
    }

    fn sample(&self) -> DirectSample {
        DirectSample {
            t: self.t,
            u_min: self.u.min(),
            u: self.u.clone(),
        }
    }
}

/// Integrates until `u_min < stop_floor * min u0` or `t = t_max` (hit exactly).
pub fn run_to_quench(u0: &GridFunction, cfg: &DirectConfig) -> Result<DirectTrace> {
    let mut solver = DirectSolver::new(u0.clone(), *cfg)?;
    let floor = cfg.stop_floor * u0.min();
    let mut samples = vec![solver.sample()];
    let mut steps = 0usize;
    let mut reached_floor = false;
    while solver.t < cfg.t_max {
        let dt = solver.next_dt().min(cfg.t_max - solver.t);
        solver.step(dt)?;
        if cfg.t_max - solver.t < 1e-14 * cfg.t_max {
            solver.t = cfg.t_max;
        }
        steps += 1;
        reached_floor = solver.u.min() < floor;
        let done = reached_floor || solver.t >= cfg.t_max;
        if done || steps % cfg.sample_stride == 0 {
            samples.push(solver.sample());
        }
        if done {
            break;
        }
    }
    let mut trace = DirectTrace {
        samples,
        reached_floor,
        steps,
        quench_estimate: None,
    };
    trace.quench_estimate = estimate_quench_time(&trace, cfg.p).ok();
    Ok(trace)
}

/// Fraction of samples used by trailing-window fits.
pub const TRAILING_FRACTION: f64 = 0.4;

/// Root of the least-squares line through `(t, u_min^{1-p})` on the trailing window.
pub fn estimate_quench_time(trace: &DirectTrace, p: f64) -> Result<QuenchEstimate> {
    check_p(p)?;
    let n = trace.samples.len();
    if n < 3 {
        return Err(QuenchError::OutOfRange("trace too short for a quench-time fit".into()));
    }
    let window = ((n as f64 * TRAILING_FRACTION).ceil() as usize).clamp(3, n);
    let m = 1.0 - p;
    let pts: Vec<(f64, f64)> = trace.samples[n - window..]
        .iter()
        .map(|s| (s.t, s.u_min.powf(m)))
        .collect();
    let (slope, intercept, rms) = linear_fit(&pts);
    if !(slope < 0.0) {
        return Err(QuenchError::OutOfRange(format!(
            "u_min^(1-p) is not decreasing on the trailing window (slope {slope:e})"
        )));
    }
    let s_range = pts.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max)
        - pts.iter().map(|q| q.1).fold(f64::INFINITY, f64::min);
    let relative_residual = if s_range > 0.0 { rms / s_range } else { 0.0 };
    let decayed = trace.last().u_min <= 0.2 * trace.samples[0].u_min;
    Ok(QuenchEstimate {
        t_star: -intercept / slope,
        relative_residual,
        window,
        low_confidence: !decayed || relative_residual > 1e-3,
    })
}

/// Ordinary least squares `y = slope x + intercept`; returns the RMS residual too.
pub(crate) fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|q| q.0).sum::<f64>() / n;
    let my = pts.iter().map(|q| q.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|q| (q.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|q| (q.0 - mx) * (q.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rms = (pts
        .iter()
        .map(|q| (q.1 - slope * q.0 - intercept).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    (slope, intercept, rms)
}

/// Short-time guard `0.1 * kappa0^{1-p}/(1-p)` for the fixed-point iteration.
pub fn duhamel_time_limit(u0: &GridFunction, p: f64) -> f64 {
    reaction_horizon_dt(u0.min(), p, 0.1)
}

/// `u(t) = e^{tΔ}u0 - ∫_0^t e^{(t-s)Δ} u(s)^p ds` by Picard iteration.
pub fn duhamel_iterate(u0: &GridFunction, p: f64, t: f64, n_sub: usize, n_iter: usize) -> Result<GridFunction> {
    duhamel_iterate_with(u0, p, t, n_sub, n_iter, Execution::default())
}

/// As [`duhamel_iterate`], choosing how the heat convolutions are executed.
///
/// The trajectory lives on the midpoints `s_j = (j + 1/2) t / n_sub`; the time
/// integral uses the midpoint rule on whole subintervals (a one-point rule on
/// the trailing half subinterval). Convolutions continue `u` past the grid
/// linearly, matching its far-field growth.
pub fn duhamel_iterate_with(
    u0: &GridFunction,
    p: f64,
    t: f64,
    n_sub: usize,
    n_iter: usize,
    exec: Execution,
) -> Result<GridFunction> {
    check_p(p)?;
    u0.check_positive()?;
    if !(t > 0.0) {
        return Err(invalid("t", format!("must be positive, got {t}")));
    }
    if n_sub == 0 {
        return Err(invalid("n_sub", "must be at least 1"));
    }
    let limit = duhamel_time_limit(u0, p);
    if t > limit * (1.0 + 1e-12) {
        return Err(QuenchError::OutsideContraction { t, limit });
    }
    let ext = Extension::Linear;
    let heat = |f: &GridFunction, s: f64| f.heat_convolve_with(s, ext, exec);
    let free_final = heat(u0, t)?;
    if n_iter == 0 {
        return Ok(free_final);
    }
    let ds = t / n_sub as f64;
    let free_mid: Vec<GridFunction> = (0..n_sub)
        .map(|j| heat(u0, (j as f64 + 0.5) * ds))
        .collect::<Result<_>>()?;
    let mut traj = free_mid.clone();
    let mut previous_residual = f64::INFINITY;
    let mut result = free_final.clone();
    for iteration in 1..=n_iter {
        let forcing: Vec<GridFunction> = traj.iter().map(|u| u.map(|v| v.powf(p))).collect();
        // acc = ∫_0^{j ds} e^{(j ds - s)Δ} u^p ds, advanced one subinterval at a time.
        let mut acc = GridFunction::zeros(*u0.grid());
        let mut next = Vec::with_capacity(n_sub);
        for j in 0..n_sub {
            let tail = heat(&forcing[j], 0.25 * ds)?.scale(0.5 * ds);
            let integral = if j == 0 { tail } else { heat(&acc, 0.5 * ds)?.add(&tail)? };
            let u = free_mid[j].sub(&integral)?;
            u.check_positive()?;
            next.push(u);
            let step = heat(&forcing[j], 0.5 * ds)?.scale(ds);
            acc = if j == 0 { step } else { heat(&acc, ds)?.add(&step)? };
        }
        result = free_final.sub(&acc)?;
        result.check_positive()?;
        let residual = traj
            .iter()
            .zip(&next)
            .map(|(a, b)| a.sub(b).map(|d| d.sup_norm()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        traj = next;
        let scale = result.sup_norm();
        if residual <= 1e-14 * scale {
            break;
        }
        if iteration > 1 && residual > previous_residual && residual > 1e-12 * scale {
            return Err(QuenchError::NotContracting {
                iteration,
                previous: previous_residual,
                current: residual,
            });
        }
        previous_residual = residual;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::model::{u_hom, v_profile, ProfileParams};

    fn grid() -> Grid {
        Grid::new(10.0, 201).unwrap()
    }

    #[test]
    fn constant_data_follows_the_homogeneous_law() {
        let u = GridFunction::constant(grid(), 1.3);
        let dt = 0.01;
        let out = step_imex(&u, dt, -1.5).unwrap();
        let exact = u_hom(1.3, -1.5, dt).unwrap();
        for &v in out.values() {
            assert!((v - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn step_is_consistent_with_the_pde() {
        let g = grid();
        let u = GridFunction::from_even_fn(g, |x| 1.0 + 0.1 * (0.5 * x).cos());
        let lap = u.laplacian().unwrap();
        let rate = |dt: f64| {
            let out = step_imex(&u, dt, -1.0).unwrap();
            let c = g.center();
            let i = c + 10;
            ((out.values()[i] - u.values()[i]) / dt - (lap.values()[i] - 1.0 / u.values()[i])).abs()
        };
        let (e1, e2) = (rate(1e-3), rate(5e-4));
        assert!(e2 < 0.6 * e1, "{e1} {e2}");
    }

    #[test]
    fn evenness_is_exact_and_crossings_are_signalled() {
        let g = grid();
        let u = GridFunction::from_even_fn(g, |x| 0.5 + 0.01 * x * x);
        let out = step_imex(&u, 1e-3, -1.0).unwrap();
        assert!(out.is_even());
        let err = step_imex(&u, 0.2, -1.0).unwrap_err();
        assert!(matches!(err, QuenchError::QuenchCrossing { .. }));
        let mut odd = u.clone();
        odd.values_mut()[0] += 1e-3;
        assert!(matches!(step_imex(&odd, 1e-3, -1.0), Err(QuenchError::NotEven { .. })));
    }

    #[test]
    fn homogeneous_run_matches_closed_form() {
        let u0 = GridFunction::constant(grid(), 1.0);
        let trace = run_to_quench(&u0, &DirectConfig::default()).unwrap();
        assert!(trace.reached_floor);
        for s in &trace.samples {
            if s.u_min < 0.05 {
                break;
            }
            let exact = (1.0 - 2.0 * s.t).sqrt();
            assert!((s.u_min - exact).abs() / exact < 1e-4);
        }
        let est = trace.quench_estimate.unwrap();
        assert!((est.t_star - 0.5).abs() < 1e-4);
        assert!(!est.low_confidence);
    }

    #[test]
    fn quench_time_for_p_minus_two() {
        let u0 = GridFunction::constant(grid(), 1.0);
        let cfg = DirectConfig {
            p: -2.0,
            ..Default::default()
        };
        let est = run_to_quench(&u0, &cfg).unwrap().quench_estimate.unwrap();
        assert!((est.t_star - 1.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn truncated_trace_is_low_confidence() {
        let u0 = GridFunction::constant(grid(), 1.0);
        let cfg = DirectConfig {
            t_max: 0.1,
            ..Default::default()
        };
        let trace = run_to_quench(&u0, &cfg).unwrap();
        assert!(!trace.reached_floor);
        assert_eq!(trace.last().t, 0.1);
        assert!(trace.quench_estimate.unwrap().low_confidence);
    }

    #[test]
    fn duhamel_homogeneous_and_zeroth_iterate() {
        let u0 = GridFunction::constant(grid(), 1.0);
        let u = duhamel_iterate(&u0, -1.0, 0.05, 20, 30).unwrap();
        for &v in u.values() {
            assert!((v - 0.9f64.sqrt()).abs() < 1e-4);
        }
        let f = GridFunction::from_even_fn(grid(), |x| 1.0 + 0.01 * x * x);
        let zeroth = duhamel_iterate(&f, -1.0, 0.01, 4, 0).unwrap();
        let heat = f.heat_convolve_with(0.01, Extension::Linear, Execution::Sequential).unwrap();
        assert_eq!(zeroth, heat);
        assert!(matches!(
            duhamel_iterate(&u0, -1.0, 0.3, 10, 5),
            Err(QuenchError::OutsideContraction { .. })
        ));
    }

    #[test]
    fn duhamel_agrees_with_imex() {
        let g = Grid::new(30.0, 1201).unwrap();
        let prm = ProfileParams::new(0.5, 0.05).unwrap();
        let u0 = GridFunction::from_even_fn(g, |x| v_profile(prm, -1.0, x));
        let t = 0.05;
        let duhamel = duhamel_iterate(&u0, -1.0, t, 40, 30).unwrap();
        let cfg = DirectConfig {
            t_max: t,
            dt_max: 2.5e-4,
            ..Default::default()
        };
        let imex = run_to_quench(&u0, &cfg).unwrap().last().u.clone();
        let rel = duhamel.sub(&imex).unwrap().sup_norm() / imex.sup_norm();
        assert!(rel < 1e-3, "relative difference {rel}");
    }
}
