//! Extraction of the modulation parameters `(a, b)` from a rescaled profile.
//!
//! A function `v` near the almost-solution family is written as
//! `v = V_{a,b} + e^{a y^2/4} xi` with `V_{a,b} = ((1-p+b y^2)/(a+1/2))^{1/(1-p)}`,
//! where `(a, b)` is fixed by requiring `xi` to be orthogonal to the two even
//! Hermite directions `e^{-a y^2/4}` and `(1 - a y^2) e^{-a y^2/4}`. In terms
//! of `v` this is the root of the two-component map
//!
//! ```text
//! G(a, b; v) = ( <V - v, w0>, <V - v, w2> ),
//! w0 = e^{-a y^2/2},  w2 = (1 - a y^2) e^{-a y^2/2}.
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{QuenchError, Result};
use crate::grid::{Grid, GridFunction};
use crate::model::{check_p, q_exponent, v_profile, ProfileParams};
use crate::par::{map_slice, Execution};

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GMapJacobian {
    /// Profile derivatives paired with the weights.
    pub a1: Mat2,
    /// Weight derivatives paired with `V - v`; vanishes on the manifold.
    pub a2: Mat2,
    /// Moment matrix of `(1, y^2)` against `(w0, w2)`.
    pub g1: Mat2,
    /// `diag(∂_a V, ∂_b V / y^2)` at `b = 0`, so that `A1(b = 0) = G1 G2`.
    pub g2: Mat2,
    pub cond_g1: f64,
    pub cond_g2: f64,
}

impl GMapJacobian {
    pub fn total(&self) -> Mat2 {
        add(self.a1, self.a2)
    }

    pub fn g1g2(&self) -> Mat2 {
        mul(self.g1, self.g2)
    }
}

fn add(x: Mat2, y: Mat2) -> Mat2 {
    [
        [x[0][0] + y[0][0], x[0][1] + y[0][1]],
        [x[1][0] + y[1][0], x[1][1] + y[1][1]],
    ]
}

fn mul(x: Mat2, y: Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
        }
    }
    out
}

fn det(m: Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Frobenius-norm condition number.
pub fn condition_number(m: Mat2) -> f64 {
    let d = det(m);
    if d == 0.0 {
        return f64::INFINITY;
    }
    let fro = |m: Mat2| m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let inv = [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]];
    fro(m) * fro(inv)
}

pub fn frobenius(m: Mat2) -> f64 {
    m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_mu(mu: (f64, f64)) -> Result<ProfileParams> {
    let (a, b) = mu;
    if !(a > 0.0 && a < 2.0) {
        return Err(QuenchError::OutOfRange(format!("a = {a} outside (0, 2)")));
    }
    ProfileParams::new(a, b)
}

/// Everything Newton needs from one pass over the grid.
struct Evaluation {
    g: [f64; 2],
    a1: Mat2,
    a2: Mat2,
    xi_l2: f64,
}

fn evaluate(mu: (f64, f64), v: &GridFunction, p: f64) -> Result<Evaluation> {
    let prm = check_mu(mu)?;
    let (a, b) = mu;
    let m = 1.0 - p;
    let two_c = prm.two_c();
    let grid = v.grid();
    let h = grid.spacing();
    let n = grid.len();
    let mut g = [0.0; 2];
    let mut a1 = [[0.0; 2]; 2];
    let mut a2 = [[0.0; 2]; 2];
    let mut xi2 = 0.0;
    for (i, &vi) in v.values().iter().enumerate() {
        let y = grid.node(i);
        let y2 = y * y;
        let wt = if i == 0 || i == n - 1 { 0.5 * h } else { h };
        let big_v = v_profile(prm, p, y);
        let e = (-0.5 * a * y2).exp();
        let w0 = e;
        let w2 = (1.0 - a * y2) * e;
        let d = big_v - vi;
        let dv_a = -big_v / (m * two_c);
        let dv_b = big_v * y2 / (m * (m + b * y2));
        g[0] += wt * d * w0;
        g[1] += wt * d * w2;
        a1[0][0] += wt * dv_a * w0;
        a1[0][1] += wt * dv_b * w0;
        a1[1][0] += wt * dv_a * w2;
        a1[1][1] += wt * dv_b * w2;
        a2[0][0] += wt * d * (-0.5 * y2 * e);
        a2[1][0] += wt * d * (-0.5 * y2 * (3.0 - a * y2) * e);
        xi2 += wt * d * d * e;
    }
    Ok(Evaluation {
        g,
        a1,
        a2,
        xi_l2: xi2.sqrt(),
    })
}

/// The orthogonality map `G(mu, v)`; zero exactly when `xi` is orthogonal to both directions.
#[allow(non_snake_case)]
pub fn G_map(mu: (f64, f64), v: &GridFunction, p: f64) -> Result<[f64; 2]> {
    check_p(p)?;
    Ok(evaluate(mu, v, p)?.g)
}

/// Analytic `∂_mu G = A1 + A2` together with the small-`b` factorisation of `A1`.
pub fn g_jacobian(mu: (f64, f64), v: &GridFunction, p: f64) -> Result<GMapJacobian> {
    check_p(p)?;
    let ev = evaluate(mu, v, p)?;
    let a = mu.0;
    let m = 1.0 - p;
    let two_c = a + 0.5;
    let v0 = (m / two_c).powf(1.0 / m);
    // Continuum moments: ∫e^{-ay²/2} = s, ∫y² e^{-ay²/2} = s/a, ∫y⁴ e^{-ay²/2} = 3s/a².
    let s = (2.0 * std::f64::consts::PI / a).sqrt();
    let g1 = [[s, s / a], [0.0, s / a - 3.0 * s / a]];
    let g2 = [[-v0 / (m * two_c), 0.0], [0.0, v0 / (m * m)]];
    Ok(GMapJacobian {
        a1: ev.a1,
        a2: ev.a2,
        g1,
        g2,
        cond_g1: condition_number(g1),
        cond_g2: condition_number(g2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub max_iters: usize,
    pub trust_radius: f64,
    pub damping: f64,
    pub tol_rel: f64,
    pub tol_abs: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            max_iters: 25,
            trust_radius: 0.2,
            damping: 0.5,
            tol_rel: 1e-10,
            tol_abs: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub a: f64,
    pub b: f64,
    /// `e^{-a y^2/4} (v - V_{a,b})`.
    pub xi: GridFunction,
    /// `<xi, e^{-a y^2/4}>` and `<xi, (1 - a y^2) e^{-a y^2/4}>`.
    pub residual_0: f64,
    pub residual_2: f64,
    pub newton_iters: usize,
    /// The root wanted `b < 0`; `b` was held at 0 and only the first condition solved.
    pub b_clamped: bool,
}

impl SplitResult {
    pub fn params(&self) -> ProfileParams {
        ProfileParams::new(self.a, self.b).expect("extracted parameters are valid")
    }
}

/// `e^{-a y^2/4} (v - V_{a,b})`.
pub fn fluctuation(v: &GridFunction, params: ProfileParams, p: f64) -> GridFunction {
    let a = params.a();
    v.map_with_node(|y, vi| (-0.25 * a * y * y).exp() * (vi - v_profile(params, p, y)))
}

pub fn extract_params(v: &GridFunction, mu_init: (f64, f64), p: f64) -> Result<SplitResult> {
    extract_params_with(v, mu_init, p, &SplitOptions::default())
}

/// Damped Newton on `G(mu, v) = 0` from `mu_init`.
pub fn extract_params_with(
    v: &GridFunction,
    mu_init: (f64, f64),
    p: f64,
    opts: &SplitOptions,
) -> Result<SplitResult> {
    check_p(p)?;
    v.check_finite()?;
    let fail = |msg: String| QuenchError::SplittingFailed(msg);
    let mut mu = (mu_init.0, mu_init.1.max(0.0));
    let mut previous_step = f64::INFINITY;
    let mut clamped = false;
    let mut iters = 0;
    loop {
        let ev = evaluate(mu, v, p).map_err(|e| fail(format!("at (a, b) = {mu:?}: {e}")))?;
        let tol = (opts.tol_rel * ev.xi_l2).max(opts.tol_abs);
        let done = ev.g[0].abs() <= tol && (clamped || ev.g[1].abs() <= tol);
        if done || previous_step < 1e-15 {
            if !done {
                return Err(fail(format!(
                    "Newton stalled with residuals {:e}, {:e} above tolerance {tol:e}",
                    ev.g[0], ev.g[1]
                )));
            }
            break;
        }
        if iters == opts.max_iters {
            return Err(fail(format!(
                "no convergence in {} iterations (residuals {:e}, {:e})",
                opts.max_iters, ev.g[0], ev.g[1]
            )));
        }
        let j = add(ev.a1, ev.a2);
        let d = det(j);
        if !(d.abs() > 0.0) || !d.is_finite() {
            return Err(fail(format!("singular Jacobian at (a, b) = {mu:?}")));
        }
        let mut da = -(j[1][1] * ev.g[0] - j[0][1] * ev.g[1]) / d;
        let mut db = -(j[0][0] * ev.g[1] - j[1][0] * ev.g[0]) / d;
        clamped = false;
        if mu.1 + db < 0.0 {
            // One-sided step: hold b at 0 and solve the first condition for a.
            clamped = true;
            db = -mu.1;
            da = -(ev.g[0] + j[0][1] * db) / j[0][0];
        }
        let mut norm = da.hypot(db);
        if norm > opts.trust_radius {
            return Err(fail(format!(
                "Newton step {norm:.3e} exceeds the trust radius {} at (a, b) = {mu:?}",
                opts.trust_radius
            )));
        }
        if norm > previous_step {
            da *= opts.damping;
            db *= opts.damping;
            norm *= opts.damping;
        }
        mu = (mu.0 + da, (mu.1 + db).max(0.0));
        previous_step = norm;
        iters += 1;
    }
    let params = ProfileParams::new(mu.0, mu.1).map_err(|e| fail(e.to_string()))?;
    let xi = fluctuation(v, params, p);
    let a = mu.0;
    let grid = *v.grid();
    let phi0 = GridFunction::from_fn(grid, |y| (-0.25 * a * y * y).exp());
    let phi2 = GridFunction::from_fn(grid, |y| (1.0 - a * y * y) * (-0.25 * a * y * y).exp());
    Ok(SplitResult {
        a,
        b: mu.1,
        residual_0: xi.inner_product(&phi0)?,
        residual_2: xi.inner_product(&phi2)?,
        xi,
        newton_iters: iters,
        b_clamped: clamped,
    })
}

/// Runs the extraction from several starting points.
pub fn multi_start(
    v: &GridFunction,
    starts: &[(f64, f64)],
    p: f64,
    exec: Execution,
) -> Vec<Result<SplitResult>> {
    map_slice(starts, exec, |&mu| extract_params(v, mu, p))
}

/// `‖e^{-y^2/8} f‖∞`, the norm controlling the parameter error.
pub fn gaussian_window_norm(f: &GridFunction) -> f64 {
    f.values()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let y = f.grid().node(i);
            (-y * y / 8.0).exp() * v.abs()
        })
        .fold(0.0, f64::max)
}

/// One monitored inequality `lhs ≲ rhs`, reported through `ratio = lhs / rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

impl BoundCheck {
    pub fn new(name: &str, lhs: f64, rhs: f64) -> Self {
        let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs };
        Self { name: name.to_string(), lhs, rhs, ratio }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcBoundsReport {
    pub a: f64,
    pub b: f64,
    pub checks: Vec<BoundCheck>,
    /// Largest implied constant over all checks.
    pub max_constant: f64,
}

/// Implied constants in the transfer of the initial weighted bounds from
/// `V_{mu0}` to the extracted profile `V_{g(v)}`.
pub fn verify_ic_bounds(
    v: &GridFunction,
    mu0: (f64, f64),
    p: f64,
    b0: f64,
    delta0: f64,
) -> Result<IcBoundsReport> {
    let split = extract_params(v, mu0, p)?;
    let grid: Grid = *v.grid();
    let v0 = check_mu(mu0)?;
    let base = v.sub(&GridFunction::from_fn(grid, |y| v_profile(v0, p, y)))?;
    let moved = v.sub(&GridFunction::from_fn(grid, |y| v_profile(split.params(), p, y)))?;
    let dmu = (split.a - mu0.0).hypot(split.b - mu0.1);
    let mut checks = vec![
        BoundCheck::new("param_shift", dmu, delta0 * b0.powf(1.5)),
        BoundCheck::new(
            "weighted_n3",
            moved.weighted_sup_norm(3.0, 0.0)?,
            base.weighted_sup_norm(3.0, 0.0)?,
        ),
        BoundCheck::new(
            "weighted_n2",
            moved.weighted_sup_norm(2.0, 0.0)?,
            delta0 * b0 + delta0 * b0.powf(1.5),
        ),
    ];
    if p < -1.0 {
        let q = q_exponent(p)?;
        checks.push(BoundCheck::new(
            "weighted_nq",
            moved.weighted_sup_norm(q, 0.0)?,
            delta0 * b0.powf(q / 2.0) + delta0 * b0.powf((1.0 + q) / 2.0),
        ));
    }
    let max_constant = checks.iter().map(|c| c.ratio).fold(0.0, f64::max);
    Ok(IcBoundsReport {
        a: split.a,
        b: split.b,
        checks,
        max_constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::hermite4_mode;

    fn grid() -> Grid {
        Grid::new(30.0, 1201).unwrap()
    }

    fn profile(a: f64, b: f64, p: f64) -> GridFunction {
        let prm = ProfileParams::new(a, b).unwrap();
        GridFunction::from_even_fn(grid(), |y| v_profile(prm, p, y))
    }

    #[test]
    fn g_vanishes_on_the_manifold_and_for_orthogonal_perturbations() {
        let v = profile(0.5, 0.05, -1.0);
        let g = G_map((0.5, 0.05), &v, -1.0).unwrap();
        assert_eq!(g, [0.0, 0.0]);
        let mode = hermite4_mode(grid(), 0.5).unwrap();
        // hermite4_mode is orthogonal to w0, w2; add it with the gauge undone.
        let pert = v.add(&mode.scale(1e-3)).unwrap();
        let g = G_map((0.5, 0.05), &pert, -1.0).unwrap();
        assert!(g[0].abs() < 1e-15 && g[1].abs() < 1e-15, "{g:?}");
    }

    #[test]
    fn g_first_component_matches_quadrature() {
        let a = 0.5;
        let eps = 1e-3;
        let v = profile(a, 0.0, -1.0);
        let bump = GridFunction::from_fn(grid(), |y| (-0.25 * a * y * y).exp() * (-0.25 * a * y * y).exp());
        let pert = v.add(&bump.scale(eps)).unwrap();
        let g = G_map((a, 0.0), &pert, -1.0).unwrap();
        let w0 = GridFunction::from_fn(grid(), |y| (-0.5 * a * y * y).exp());
        let expected = -eps * bump.inner_product(&w0).unwrap();
        assert!((g[0] - expected).abs() < 1e-15);
        // Continuum value ∫e^{-ay²} = sqrt(π/a).
        assert!((expected + eps * (std::f64::consts::PI / a).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let p = -1.0;
        let v = profile(0.55, 0.04, p).add(&hermite4_mode(grid(), 0.5).unwrap().scale(1e-2)).unwrap();
        let mu = (0.5, 0.05);
        let jac = g_jacobian(mu, &v, p).unwrap().total();
        let eps = 1e-6;
        for k in 0..2 {
            let (mut hi, mut lo) = (mu, mu);
            if k == 0 {
                hi.0 += eps;
                lo.0 -= eps;
            } else {
                hi.1 += eps;
                lo.1 -= eps;
            }
            let gh = G_map(hi, &v, p).unwrap();
            let gl = G_map(lo, &v, p).unwrap();
            for i in 0..2 {
                let fd = (gh[i] - gl[i]) / (2.0 * eps);
                assert!((fd - jac[i][k]).abs() <= 1e-6 * jac[i][k].abs().max(1e-3), "{i}{k}: {fd} vs {}", jac[i][k]);
            }
        }
    }

    #[test]
    fn a2_vanishes_on_manifold_and_a1_factorises_at_small_b() {
        let p = -1.0;
        let jac = g_jacobian((0.5, 0.0), &profile(0.5, 0.0, p), p).unwrap();
        assert_eq!(jac.a2, [[0.0; 2]; 2]);
        let gap = |b: f64| {
            let j = g_jacobian((0.5, b), &profile(0.5, b, p), p).unwrap();
            let diff = [
                [j.a1[0][0] - j.g1g2()[0][0], j.a1[0][1] - j.g1g2()[0][1]],
                [j.a1[1][0] - j.g1g2()[1][0], j.a1[1][1] - j.g1g2()[1][1]],
            ];
            frobenius(diff)
        };
        assert!(gap(0.0) < 1e-10);
        let slope = (gap(0.02) / gap(0.01)).log2();
        assert!((slope - 1.0).abs() < 0.1, "slope {slope}");
        assert!(jac.cond_g1.is_finite() && jac.cond_g2.is_finite());
    }

    #[test]
    fn manifold_points_are_fixed() {
        let v = profile(0.5, 0.02, -1.0);
        let s = extract_params(&v, (0.45, 0.03), -1.0).unwrap();
        assert!((s.a - 0.5).abs() < 1e-10 && (s.b - 0.02).abs() < 1e-10);
        assert!(s.xi.sup_norm() < 1e-10);
        assert!(s.residual_0.abs() < 1e-12 && s.residual_2.abs() < 1e-12);
    }

    #[test]
    fn orthogonal_perturbation_keeps_parameters() {
        let p = -1.0;
        let mode = hermite4_mode(grid(), 0.5).unwrap();
        let v = profile(0.5, 0.02, p).add(&mode.scale(1e-3)).unwrap();
        let s = extract_params(&v, (0.48, 0.025), p).unwrap();
        assert!((s.a - 0.5).abs() < 1e-8 && (s.b - 0.02).abs() < 1e-8);
        let expected = mode.map_with_node(|y, m| 1e-3 * m * (-0.125 * y * y).exp());
        assert!(s.xi.sub(&expected).unwrap().sup_norm() < 1e-9);
    }

    #[test]
    fn parameter_shift_is_controlled_by_the_window_norm() {
        let p = -1.0;
        let v0 = profile(0.5, 0.02, p);
        let bump = GridFunction::from_fn(grid(), |y| (-y * y / 8.0).exp());
        let v = v0.add(&bump.scale(1e-4)).unwrap();
        let s = extract_params(&v, (0.5, 0.02), p).unwrap();
        let shift = (s.a - 0.5).hypot(s.b - 0.02);
        let window = gaussian_window_norm(&v.sub(&v0).unwrap());
        let jac = g_jacobian((0.5, 0.02), &v0, p).unwrap().total();
        // |Δmu| ≤ ‖J^{-1}‖ |G(mu0, v)| and |G| ≤ window · ∫(|w0| + |w2|) e^{y²/8}.
        let c = condition_number(jac) / frobenius(jac) * 20.0;
        assert!(shift > 0.0 && shift <= c * window, "{shift} vs {}", c * window);
    }

    #[test]
    fn clamped_extraction_from_v_a() {
        let p = -1.0;
        let v = profile(0.5, 0.0, p);
        let s = extract_params(&v, (0.52, 0.01), p).unwrap();
        assert!((s.a - 0.5).abs() < 1e-9 && s.b < 1e-9);
    }

    #[test]
    fn divergence_is_reported() {
        let v = profile(0.5, 0.02, -1.0);
        let err = extract_params(&v, (1.5, 0.0), -1.0).unwrap_err();
        assert!(matches!(err, QuenchError::SplittingFailed(_)), "{err}");
    }

    #[test]
    fn ic_bounds_report() {
        let p = -1.0;
        let v = profile(0.5, 0.05, p);
        let r = verify_ic_bounds(&v, (0.5, 0.05), p, 0.05, 0.1).unwrap();
        assert!(r.checks.iter().all(|c| c.lhs < 1e-12));
        let r = verify_ic_bounds(&v, (0.5, 0.05), p, 0.05, 0.0).unwrap();
        assert_eq!(r.max_constant, 0.0);
    }
}
