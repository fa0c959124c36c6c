//! Evolution in the self-similar frame.
//!
//! With `v(y, tau) = lambda^{2/(p-1)} u(lambda y, t)`, `dt/dtau = lambda^2` and
//! `a = -lambda lambda_t`, the solution obeys
//!
//! ```text
//! v_tau = v_yy - a y v_y + 2a/(1-p) v - v^p .
//! ```
//!
//! Each step splits the right-hand side: the reaction `2a/(1-p) v - v^p` is a
//! Bernoulli equation solved exactly (so `((1-p)/(2a))^{1/(1-p)}` is exactly
//! stationary), then diffusion and drift are advanced by backward Euler with
//! central differences. The scaling rate `a` and curvature `b` are re-extracted
//! by the splitting after every step, which keeps the fluctuation orthogonal to
//! the neutral directions instead of integrating separate modulation ODEs.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, QuenchError, Result};
use crate::grid::{solve_tridiagonal, Grid, GridFunction};
use crate::model::{check_p, v_profile, ProfileParams};
use crate::splitting::{extract_params_with, SplitOptions, SplitResult};

/// `v(y) = lambda^{2/(p-1)} u(lambda y)` sampled on `y_grid`.
pub fn to_blowup_frame(u: &GridFunction, lambda: f64, p: f64, y_grid: Grid) -> Result<GridFunction> {
    check_p(p)?;
    change_frame(u, lambda, lambda.powf(2.0 / (p - 1.0)), y_grid)
}

/// Inverse of [`to_blowup_frame`]: `u(x) = lambda^{2/(1-p)} v(x / lambda)`.
pub fn to_physical(v: &GridFunction, lambda: f64, p: f64, x_grid: Grid) -> Result<GridFunction> {
    check_p(p)?;
    if !(lambda > 0.0) {
        return Err(invalid("lambda", format!("must be positive, got {lambda}")));
    }
    change_frame(v, 1.0 / lambda, lambda.powf(2.0 / (1.0 - p)), x_grid)
}

/// `out(z) = factor * f(stretch z)` on `target`, with cubic interpolation.
fn change_frame(f: &GridFunction, stretch: f64, factor: f64, target: Grid) -> Result<GridFunction> {
    if !(stretch > 0.0 && stretch.is_finite()) {
        return Err(invalid("lambda", format!("must be positive and finite, got {stretch}")));
    }
    let reach = stretch * target.half_width();
    if !f.grid().contains(reach) {
        return Err(QuenchError::OutOfRange(format!(
            "target grid reaches {reach}, beyond the source half-width {}",
            f.grid().half_width()
        )));
    }
    let half = target.nodes()[target.center()..]
        .iter()
        .map(|&z| f.interpolate(stretch * z).map(|v| factor * v))
        .collect::<Result<Vec<_>>>()?;
    GridFunction::from_half(target, &half)
}

/// `w = e^{-a y^2/4} v`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeView {
    pub w: GridFunction,
    pub a: f64,
}

impl GaugeView {
    /// Undoes the gauge: `v = e^{a y^2/4} w`.
    pub fn to_v(&self) -> GridFunction {
        let a = self.a;
        self.w.map_with_node(|y, w| w / (-0.25 * a * y * y).exp())
    }
}

pub fn gauge_transform(v: &GridFunction, a: f64) -> GaugeView {
    GaugeView {
        w: v.map_with_node(|y, x| x * (-0.25 * a * y * y).exp()),
        a,
    }
}

/// One instant of the self-similar frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BlowupState {
    pub v: GridFunction,
    pub lambda: f64,
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    pub t: f64,
}

impl BlowupState {
    pub fn params(&self) -> Result<ProfileParams> {
        ProfileParams::new(self.a, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescaledConfig {
    pub p: f64,
    pub dtau: f64,
    pub tau_max: f64,
    /// Record every `sample_stride`-th step.
    pub sample_stride: usize,
    /// Keep `a`, `b` fixed instead of re-extracting them.
    pub frozen: bool,
    /// Store the full field `v` with every sample.
    pub store_fields: bool,
    pub split: SplitOptions,
}

impl Default for RescaledConfig {
    fn default() -> Self {
        Self {
            p: -1.0,
            dtau: 1e-3,
            tau_max: 30.0,
            sample_stride: 50,
            frozen: false,
            store_fields: true,
            split: SplitOptions::default(),
        }
    }
}

impl RescaledConfig {
    pub fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        if !(self.dtau > 0.0 && self.dtau <= 0.1) {
            return Err(invalid("dtau", format!("must lie in (0, 0.1], got {}", self.dtau)));
        }
        if !(self.tau_max >= 0.0 && self.tau_max.is_finite()) {
            return Err(invalid("tau_max", format!("must be nonnegative, got {}", self.tau_max)));
        }
        if self.sample_stride == 0 {
            return Err(invalid("sample_stride", "must be at least 1"));
        }
        Ok(())
    }
}

/// Exact flow of `v' = 2a/(1-p) v - v^p` over `dtau`, acting on `s = v^{1-p}`.
fn reaction_flow(v: &[f64], a: f64, p: f64, dtau: f64) -> Result<Vec<f64>> {
    let m = 1.0 - p;
    let fixed = m / (2.0 * a);
    let growth = (2.0 * a * dtau).exp();
    v.iter()
        .enumerate()
        .map(|(index, &x)| {
            let s = (x.powf(m) - fixed) * growth + fixed;
            if s > 0.0 && s.is_finite() {
                Ok(s.powf(1.0 / m))
            } else {
                Err(QuenchError::NonPositive { index, value: s })
            }
        })
        .collect()
}

/// Backward Euler for `v_tau = v_yy - a y v_y` on `[0, L]`: reflection at the
/// origin, Dirichlet value `edge` at `y = L`.
fn drift_diffusion_half(half: &[f64], a: f64, h: f64, dtau: f64, edge: f64) -> Result<Vec<f64>> {
    let n = half.len();
    let r = dtau / (h * h);
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0 + 2.0 * r; n];
    let mut upper = vec![0.0; n];
    let mut rhs = half.to_vec();
    upper[0] = -2.0 * r;
    for i in 1..n - 1 {
        let drift = a * (i as f64 * h) * dtau / (2.0 * h);
        lower[i] = -r - drift;
        upper[i] = -r + drift;
    }
    diag[n - 1] = 1.0;
    lower[n - 1] = 0.0;
    rhs[n - 1] = edge;
    solve_tridiagonal(&lower, &diag, &upper, &rhs).ok_or_else(|| QuenchError::SolverAbort {
        t: f64::NAN,
        reason: "singular drift-diffusion system".into(),
    })
}

/// Advances `v` by one split step with the current `a`, leaving the parameters alone.
pub fn advance_field(state: &BlowupState, dtau: f64, p: f64) -> Result<GridFunction> {
    let grid = *state.v.grid();
    let reacted = reaction_flow(state.v.half(), state.a, p, dtau)?;
    let edge = v_profile(state.params()?, p, grid.half_width());
    let next = drift_diffusion_half(&reacted, state.a, grid.spacing(), dtau, edge)?;
    let v = GridFunction::from_half(grid, &next)?;
    v.check_finite()?;
    v.check_positive()?;
    Ok(v)
}

/// One step: field update with the current `a`, re-extraction of `(a, b)`,
/// then `lambda <- lambda e^{-abar dtau}` and `t <- t + lambda_mid^2 dtau`
/// with `abar` the trapezoid average of the old and new `a`.
pub fn step_rescaled(
    state: &BlowupState,
    dtau: f64,
    cfg: &RescaledConfig,
) -> Result<(BlowupState, Option<SplitResult>)> {
    if !(dtau > 0.0) {
        return Err(invalid("dtau", format!("must be positive, got {dtau}")));
    }
    let v = advance_field(state, dtau, cfg.p)?;
    let (a, b, split) = if cfg.frozen {
        (state.a, state.b, None)
    } else {
        let s = extract_params_with(&v, (state.a, state.b), cfg.p, &cfg.split)?;
        (s.a, s.b, Some(s))
    };
    let abar = 0.5 * (state.a + a);
    let lambda_mid = state.lambda * (-0.5 * abar * dtau).exp();
    let next = BlowupState {
        v,
        lambda: state.lambda * (-abar * dtau).exp(),
        a,
        b,
        tau: state.tau + dtau,
        t: state.t + lambda_mid * lambda_mid * dtau,
    };
    Ok((next, split))
}

/// Recorded scalars (and optionally the field) at one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledSample {
    pub tau: f64,
    pub t: f64,
    /// Physical time elapsed since the previous sample.
    pub dt: f64,
    pub lambda: f64,
    pub a: f64,
    pub b: f64,
    pub v_min: f64,
    /// `‖<y>^{-n} e^{a y^2/4} xi‖∞ = ‖<y>^{-n} (v - V_{a,b})‖∞` for n = 2, 3, q.
    pub xi_n2: f64,
    pub xi_n3: f64,
    pub xi_nq: f64,
    pub residual_0: f64,
    pub residual_2: f64,
    pub newton_iters: usize,
    pub v: Option<GridFunction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    /// Last successfully completed `tau`.
    pub tau: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RescaledTrace {
    pub p: f64,
    pub q: f64,
    pub dtau: f64,
    pub samples: Vec<RescaledSample>,
    /// State after the last completed step.
    pub final_lambda: f64,
    pub final_a: f64,
    pub abort: Option<AbortInfo>,
}

impl RescaledTrace {
    /// Tail `∫_{t_end}^{t*} dt ≈ lambda^2/(2a)` from the final state.
    pub fn tail_time(&self) -> f64 {
        self.final_lambda.powi(2) / (2.0 * self.final_a)
    }

    /// `t* - t` at every sample, summed backwards from the end to avoid cancellation.
    pub fn time_to_quench(&self) -> Vec<f64> {
        let n = self.samples.len();
        let mut out = vec![0.0; n];
        let mut acc = self.tail_time();
        for k in (0..n).rev() {
            out[k] = acc;
            acc += self.samples[k].dt;
        }
        out
    }

    /// `t*` estimated from the final state.
    pub fn t_star(&self) -> f64 {
        let last = self.samples.last().expect("trace holds the initial sample");
        last.t + self.tail_time()
    }
}

fn record(
    state: &BlowupState,
    split: Option<&SplitResult>,
    dt: f64,
    q: f64,
    p: f64,
    store: bool,
) -> Result<RescaledSample> {
    let profile = state.params()?;
    let diff = state.v.map_with_node(|y, v| v - v_profile(profile, p, y));
    Ok(RescaledSample {
        tau: state.tau,
        t: state.t,
        dt,
        lambda: state.lambda,
        a: state.a,
        b: state.b,
        v_min: state.v.min(),
        xi_n2: diff.weighted_sup_norm(2.0, 0.0)?,
        xi_n3: diff.weighted_sup_norm(3.0, 0.0)?,
        xi_nq: diff.weighted_sup_norm(q, 0.0)?,
        residual_0: split.map_or(0.0, |s| s.residual_0),
        residual_2: split.map_or(0.0, |s| s.residual_2),
        newton_iters: split.map_or(0, |s| s.newton_iters),
        v: store.then(|| state.v.clone()),
    })
}

/// Runs to `tau_max`. A failed step ends the run early with [`RescaledTrace::abort`]
/// set; the samples up to the last valid state are kept.
pub fn evolve_rescaled(
    v0: &GridFunction,
    mu_init: (f64, f64),
    lambda0: f64,
    cfg: &RescaledConfig,
) -> Result<RescaledTrace> {
    cfg.validate()?;
    let p = cfg.p;
    let q = crate::model::q_exponent(p)?;
    if !(lambda0 > 0.0) {
        return Err(invalid("lambda0", format!("must be positive, got {lambda0}")));
    }
    v0.check_finite()?;
    v0.check_positive()?;
    v0.check_even()?;
    let (mut state, split0) = if cfg.frozen {
        let state = BlowupState {
            v: v0.clone(),
            lambda: lambda0,
            a: mu_init.0,
            b: mu_init.1,
            tau: 0.0,
            t: 0.0,
        };
        (state, None)
    } else {
        let s = extract_params_with(v0, mu_init, p, &cfg.split)?;
        let state = BlowupState {
            v: v0.clone(),
            lambda: lambda0,
            a: s.a,
            b: s.b,
            tau: 0.0,
            t: 0.0,
        };
        (state, Some(s))
    };
    let mut samples = vec![record(&state, split0.as_ref(), 0.0, q, p, cfg.store_fields)?];
    let n_steps = (cfg.tau_max / cfg.dtau).round() as usize;
    let mut since_sample = 0.0;
    let mut abort = None;
    for k in 1..=n_steps {
        match step_rescaled(&state, cfg.dtau, cfg) {
            Ok((next, split)) => {
                since_sample += next.t - state.t;
                state = next;
                if k % cfg.sample_stride == 0 || k == n_steps {
                    samples.push(record(&state, split.as_ref(), since_sample, q, p, cfg.store_fields)?);
                    since_sample = 0.0;
                }
            }
            Err(e) => {
                if since_sample > 0.0 {
                    samples.push(record(&state, None, since_sample, q, p, cfg.store_fields)?);
                }
                abort = Some(AbortInfo {
                    tau: state.tau,
                    reason: e.to_string(),
                });
                break;
            }
        }
    }
    Ok(RescaledTrace {
        p,
        q,
        dtau: cfg.dtau,
        samples,
        final_lambda: state.lambda,
        final_a: state.a,
        abort,
    })
}
