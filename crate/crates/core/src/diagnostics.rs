//! Estimating functions, a priori inequality monitors, the comparison bound
//! and asymptotic fits along a rescaled run.
//!
//! The analytic inequalities hold up to implied constants. Here every
//! inequality is turned into a ratio `C(tau) = LHS/RHS` with all constants set
//! to one, and the contract checked is that `C` does not run away: its
//! maximum over the trailing half of the run is at most twice its maximum over
//! the first half.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::direct::{estimate_quench_time, linear_fit, DirectTrace, TRAILING_FRACTION};
use crate::error::{QuenchError, Result};
use crate::linops::{gamma1, gamma2};
use crate::model::{beta_of_tau, comparison_envelope, barrier_constant, check_p};
use crate::rescaled::RescaledTrace;

/// Normalised quantities below this are reported as exactly zero, so that a
/// run sitting on a profile with `beta = 0` gives `0` instead of `0/0`.
const NUMERIC_FLOOR: f64 = 1e-12;

/// Runs shorter than this in `tau` get a partial [`FitReport`].
pub const MIN_FIT_TAU: f64 = 20.0;

/// Divergence threshold of the no-runaway contract.
pub const RUNAWAY_FACTOR: f64 = 2.0;

/// Shortest `tau` span on which the no-runaway contract is assessed; shorter
/// runs are still inside the initial layer, where every majorant grows from
/// its starting value.
pub const MIN_MONITOR_TAU: f64 = 5.0;

fn normalised(num: f64, den: f64) -> f64 {
    if num.abs() <= NUMERIC_FLOOR {
        0.0
    } else {
        num / den
    }
}

/// One sample of the estimating functions. `m1`, `m2`, `mq`, `big_a`, `big_b`
/// are running maxima; the remaining fields are instantaneous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorantRecord {
    pub tau: f64,
    pub t: f64,
    pub lambda: f64,
    pub a: f64,
    pub b: f64,
    pub beta: f64,
    pub a_tau: f64,
    pub b_tau: f64,
    pub m1: f64,
    pub m2: f64,
    /// Only for `p < -1`.
    pub mq: Option<f64>,
    pub big_a: f64,
    pub big_b: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// `‖<y>^{-3} e^{a y^2/4} xi‖∞ / beta^{3/2}` at this sample.
    pub remainder_ratio: f64,
    pub xi_n3: f64,
    pub v_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajorantTrace {
    pub p: f64,
    pub q: f64,
    pub beta0: f64,
    pub records: Vec<MajorantRecord>,
}

impl MajorantTrace {
    pub fn last(&self) -> Option<&MajorantRecord> {
        self.records.last()
    }

    /// `tau,t,lambda,a,b,M1,M2,Mq,A,B,beta,Gamma1,Gamma2,v_min`; `Mq` is empty for `p >= -1`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tau,t,lambda,a,b,M1,M2,Mq,A,B,beta,Gamma1,Gamma2,v_min")?;
        for r in &self.records {
            let mq = r.mq.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.tau, r.t, r.lambda, r.a, r.b, r.m1, r.m2, mq, r.big_a, r.big_b, r.beta, r.gamma1,
                r.gamma2, r.v_min
            )?;
        }
        Ok(())
    }
}

/// Centred differences over two sample strides; one-sided at the ends.
pub fn finite_difference(tau: &[f64], x: &[f64]) -> Vec<f64> {
    let n = tau.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|k| {
            let (lo, hi) = (k.saturating_sub(1), (k + 1).min(n - 1));
            (x[hi] - x[lo]) / (tau[hi] - tau[lo])
        })
        .collect()
}

pub fn majorants(trace: &RescaledTrace) -> Result<MajorantTrace> {
    let p = trace.p;
    check_p(p)?;
    let first = trace
        .samples
        .first()
        .ok_or_else(|| QuenchError::OutOfRange("trace holds no samples".into()))?;
    let beta0 = first.b;
    let tau0 = first.tau;
    let m = 1.0 - p;
    let taus: Vec<f64> = trace.samples.iter().map(|s| s.tau).collect();
    let a_tau = finite_difference(&taus, &trace.samples.iter().map(|s| s.a).collect::<Vec<_>>());
    let b_tau = finite_difference(&taus, &trace.samples.iter().map(|s| s.b).collect::<Vec<_>>());
    let with_q = p < -1.0;
    let (mut m1, mut m2, mut mq, mut big_a, mut big_b) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut records = Vec::with_capacity(trace.samples.len());
    for (k, s) in trace.samples.iter().enumerate() {
        let beta = beta_of_tau(beta0, p, s.tau - tau0)?;
        let ratio = normalised(s.xi_n3, beta.powf(1.5));
        m1 = m1.max(ratio);
        m2 = m2.max(normalised(s.xi_n2, beta));
        if with_q {
            mq = mq.max(normalised(s.xi_nq, beta.powf(0.5 * trace.q)));
        }
        big_a = big_a.max(normalised((s.a - 0.5 + 2.0 * s.b / m).abs(), beta * beta));
        big_b = big_b.max(normalised((s.b - beta).abs(), beta.powf(1.5)));
        records.push(MajorantRecord {
            tau: s.tau,
            t: s.t,
            lambda: s.lambda,
            a: s.a,
            b: s.b,
            beta,
            a_tau: a_tau[k],
            b_tau: b_tau[k],
            m1,
            m2,
            mq: with_q.then_some(mq),
            big_a,
            big_b,
            gamma1: gamma1(s.a, s.b, a_tau[k], p),
            gamma2: gamma2(s.a, s.b, b_tau[k], p),
            remainder_ratio: ratio,
            xi_n3: s.xi_n3,
            v_min: s.v_min,
        });
    }
    Ok(MajorantTrace { p, q: trace.q, beta0, records })
}

/// No-runaway summary of a per-sample series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityMonitor {
    pub name: String,
    /// False where the inequality does not apply (e.g. the `M_q` bound for `p >= -1`).
    pub applicable: bool,
    pub max_constant: f64,
    pub first_half_max: f64,
    pub trailing_half_max: f64,
    /// False when the run is too short for the contract (see [`MIN_MONITOR_TAU`]).
    pub assessed: bool,
    pub diverging: bool,
}

fn tau_span(mtrace: &MajorantTrace) -> f64 {
    match (mtrace.records.first(), mtrace.records.last()) {
        (Some(a), Some(b)) => b.tau - a.tau,
        _ => 0.0,
    }
}

impl InequalityMonitor {
    /// Non-finite entries always count as divergence.
    fn from_series(name: &str, series: &[f64], span: f64) -> Self {
        let split = series.len() / 2;
        let max = |s: &[f64]| s.iter().copied().fold(0.0f64, f64::max);
        let first = max(&series[..split.max(1).min(series.len())]);
        let trailing = max(&series[split..]);
        let any_bad = series.iter().any(|c| !c.is_finite());
        let assessed = span >= MIN_MONITOR_TAU;
        Self {
            name: name.to_string(),
            applicable: true,
            max_constant: max(series),
            first_half_max: first,
            trailing_half_max: trailing,
            assessed,
            diverging: any_bad || (assessed && trailing > RUNAWAY_FACTOR * first + NUMERIC_FLOOR),
        }
    }

    fn not_applicable(name: &str) -> Self {
        Self {
            name: name.to_string(),
            applicable: false,
            max_constant: 0.0,
            first_half_max: 0.0,
            trailing_half_max: 0.0,
            assessed: false,
            diverging: false,
        }
    }

    pub fn holds(&self) -> bool {
        !self.applicable || !self.diverging
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AprioriReport {
    /// The bounds on `B`, `A`, `M_1`, `M_2`, `M_q`, in that order.
    pub inequalities: Vec<InequalityMonitor>,
    /// `|Gamma_i| <= beta^{5/2} (1 + M_1^{2-p} + A M_1)`.
    pub gamma: InequalityMonitor,
}

impl AprioriReport {
    pub fn all_hold(&self) -> bool {
        self.inequalities.iter().all(InequalityMonitor::holds)
    }

    pub fn diverging(&self) -> Vec<&str> {
        self.inequalities
            .iter()
            .filter(|m| !m.holds())
            .map(|m| m.name.as_str())
            .collect()
    }
}

pub fn monitor_apriori(mtrace: &MajorantTrace) -> AprioriReport {
    let p = mtrace.p;
    let recs = &mtrace.records;
    let Some(r0) = recs.first() else {
        let names = ["B", "A", "M1", "M2", "Mq"];
        return AprioriReport {
            inequalities: names.iter().map(|n| InequalityMonitor::from_series(n, &[], 0.0)).collect(),
            gamma: InequalityMonitor::from_series("Gamma", &[], 0.0),
        };
    };
    let b0_4 = mtrace.beta0.max(0.0).powf(0.25);
    let b0_2 = mtrace.beta0.max(0.0).sqrt();
    let strong = p < -1.0;
    let span = tau_span(mtrace);
    let mut series = vec![Vec::with_capacity(recs.len()); 5];
    let mut gamma = Vec::with_capacity(recs.len());
    for r in recs {
        let (m1, m2, a, b) = (r.m1, r.m2, r.big_a, r.big_b);
        let mq = r.mq.unwrap_or(0.0);
        let m1_pow = m1.powf(2.0 - p);
        let common = 1.0 + m1_pow + a * m1;
        series[0].push(b / (1.0 + m1 * a + m1_pow + a));
        series[1].push(a / (r0.big_a + 1.0 + b0_2 * common));
        let m1_rhs = if strong {
            r0.m1 + b0_4 * common + m1 * (mq.powf(1.0 - p) + mq)
        } else {
            r0.m1 + m1 * m2 + b0_4 * common
        };
        series[2].push(normalised(m1, m1_rhs));
        let m2_rhs = if strong {
            r0.m2 + m1 + m2 * (mq.powf(1.0 - p) + mq) + b0_4 * (1.0 + m1_pow + m2 + a * m1)
        } else {
            r0.m2 + m1 + m2 * m2 + b0_4 * common
        };
        series[3].push(normalised(m2, m2_rhs));
        if strong {
            let r0q = r0.mq.unwrap_or(0.0);
            let rhs = r0q + m2 + mq.powf(2.0 - p) + mq * mq + b0_4 * (1.0 + mq + m1_pow + m1 * a);
            series[4].push(normalised(mq, rhs));
        }
        let g = r.gamma1.abs().max(r.gamma2.abs());
        gamma.push(normalised(g, r.beta.powf(2.5) * common));
    }
    let mut inequalities = vec![
        InequalityMonitor::from_series("B", &series[0], span),
        InequalityMonitor::from_series("A", &series[1], span),
        InequalityMonitor::from_series("M1", &series[2], span),
        InequalityMonitor::from_series("M2", &series[3], span),
    ];
    inequalities.push(if strong {
        InequalityMonitor::from_series("Mq", &series[4], span)
    } else {
        InequalityMonitor::not_applicable("Mq")
    });
    AprioriReport { inequalities, gamma: InequalityMonitor::from_series("Gamma", &gamma, span) }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// `min (v - envelope)` over all stored fields; `+inf` when none is stored.
    pub min_slack: f64,
    pub tau_at_min: f64,
    pub y_at_min: f64,
    pub fields_checked: usize,
}

/// Slack of `v >= K^{1/(p-1)} g(K^{1/2} y, beta(tau))` over every stored field.
/// Nodes adjacent to the jump of `g` are checked against both branch values.
pub fn comparison_check(trace: &RescaledTrace, b0: f64, c0: f64, p: f64) -> Result<ComparisonReport> {
    check_p(p)?;
    let k = barrier_constant(b0, c0, p);
    let m = 1.0 - p;
    let mut report = ComparisonReport {
        min_slack: f64::INFINITY,
        tau_at_min: 0.0,
        y_at_min: 0.0,
        fields_checked: 0,
    };
    let tau0 = trace.samples.first().map_or(0.0, |s| s.tau);
    for s in &trace.samples {
        let Some(v) = &s.v else { continue };
        report.fields_checked += 1;
        let beta = beta_of_tau(b0, p, s.tau - tau0)?;
        let grid = v.grid();
        let h = grid.spacing();
        let y_jump = if beta > 0.0 { (4.0 * m / beta).sqrt() / k.sqrt() } else { f64::INFINITY };
        for (i, &val) in v.values().iter().enumerate() {
            let y = grid.node(i);
            let mut env = comparison_envelope(y, b0, c0, beta, p);
            if (y.abs() - y_jump).abs() <= h {
                let inner = comparison_envelope(y_jump * (1.0 - 1e-12), b0, c0, beta, p);
                let outer = comparison_envelope(y_jump * (1.0 + 1e-12), b0, c0, beta, p);
                env = env.max(inner.max(outer));
            }
            let slack = val - env;
            if slack < report.min_slack {
                report.min_slack = slack;
                report.tau_at_min = s.tau;
                report.y_at_min = y;
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// From the final state: `t_end + lambda^2/(2a)`.
    pub t_star: f64,
    /// Root of the trailing-window regression of `lambda^2` against `t`.
    pub t_star_regression: Option<f64>,
    /// Direct-solver estimate, when a direct trace is supplied.
    pub t_star_direct: Option<f64>,
    /// Slope of `ln lambda` against `ln(t* - t)`.
    pub lambda_exponent: Option<f64>,
    /// `lambda(t) ~ lambda_prefactor (t* - t)^{lambda_exponent}`.
    pub lambda_prefactor: Option<f64>,
    pub lambda_fit_rms: Option<f64>,
    /// Trailing mean of `b ln(t* - t)`.
    pub b_log_constant: Option<f64>,
    /// Same with `|ln(t* - t)|`; differs from `b_log_constant` only in sign.
    pub b_log_constant_abs: Option<f64>,
    /// `-1/slope` of `1/b` against `|ln(t* - t)|`, which removes the
    /// `O(1)` offset of `1/b`.
    pub b_log_extrapolated: Option<f64>,
    /// `(p-1)^2/(4p)`.
    pub b_log_target: f64,
    /// Trailing mean of `c = (a + 1/2)/2`.
    pub c_limit: Option<f64>,
    pub window_samples: usize,
    pub window_tau: (f64, f64),
    pub flags: Vec<String>,
}

/// Fits on the trailing [`TRAILING_FRACTION`] of the samples. `direct`, if
/// given, must use the same time units as `trace`.
pub fn fit_asymptotics(trace: &RescaledTrace, direct: Option<&DirectTrace>) -> Result<FitReport> {
    let p = trace.p;
    check_p(p)?;
    let n = trace.samples.len();
    if n == 0 {
        return Err(QuenchError::OutOfRange("trace holds no samples".into()));
    }
    let t_star = trace.t_star();
    let remaining = trace.time_to_quench();
    let start = ((1.0 - TRAILING_FRACTION) * n as f64).floor() as usize;
    let window: Vec<usize> = (start.min(n - 1)..n).filter(|&k| remaining[k] > 0.0).collect();
    let mut report = FitReport {
        t_star,
        t_star_regression: None,
        t_star_direct: None,
        lambda_exponent: None,
        lambda_prefactor: None,
        lambda_fit_rms: None,
        b_log_constant: None,
        b_log_constant_abs: None,
        b_log_extrapolated: None,
        b_log_target: (p - 1.0).powi(2) / (4.0 * p),
        c_limit: None,
        window_samples: window.len(),
        window_tau: (
            window.first().map_or(f64::NAN, |&k| trace.samples[k].tau),
            window.last().map_or(f64::NAN, |&k| trace.samples[k].tau),
        ),
        flags: Vec::new(),
    };
    if let Some(d) = direct {
        match estimate_quench_time(d, p) {
            Ok(est) => {
                if est.low_confidence {
                    report.flags.push("direct-estimate-low-confidence".into());
                }
                report.t_star_direct = Some(est.t_star);
            }
            Err(e) => report.flags.push(format!("direct-estimate-failed: {e}")),
        }
    }
    if trace.abort.is_some() {
        report.flags.push("aborted-run".into());
    }
    let tau_end = trace.samples[n - 1].tau - trace.samples[0].tau;
    if tau_end < MIN_FIT_TAU || window.len() < 5 {
        report.flags.push(format!(
            "insufficient-window: tau span {tau_end} (need {MIN_FIT_TAU}), {} window samples",
            window.len()
        ));
        return Ok(report);
    }
    let samples = &trace.samples;
    let mean = |f: &dyn Fn(usize) -> f64| window.iter().map(|&k| f(k)).sum::<f64>() / window.len() as f64;

    let lam: Vec<(f64, f64)> = window.iter().map(|&k| (remaining[k].ln(), samples[k].lambda.ln())).collect();
    let (slope, intercept, rms) = linear_fit(&lam);
    report.lambda_exponent = Some(slope);
    report.lambda_prefactor = Some(intercept.exp());
    report.lambda_fit_rms = Some(rms);

    let sq: Vec<(f64, f64)> = window.iter().map(|&k| (samples[k].t - samples[0].t, samples[k].lambda.powi(2))).collect();
    let (s2, i2, _) = linear_fit(&sq);
    if s2 < 0.0 {
        report.t_star_regression = Some(samples[0].t - i2 / s2);
    }

    let b_log = mean(&|k| samples[k].b * remaining[k].ln());
    report.b_log_constant = Some(b_log);
    report.b_log_constant_abs = Some(mean(&|k| samples[k].b * remaining[k].ln().abs()));
    if window.iter().all(|&k| samples[k].b > 0.0) {
        let inv: Vec<(f64, f64)> = window.iter().map(|&k| (remaining[k].ln().abs(), 1.0 / samples[k].b)).collect();
        let (sb, _, _) = linear_fit(&inv);
        if sb > 0.0 {
            report.b_log_extrapolated = Some(-1.0 / sb);
        }
    } else {
        report.flags.push("nonpositive-b-in-window".into());
    }
    report.c_limit = Some(mean(&|k| 0.5 * (samples[k].a + 0.5)));
    Ok(report)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemainderReport {
    pub envelope_exponent: f64,
    pub max_ratio: f64,
    pub first_half_max: f64,
    pub trailing_half_max: f64,
    pub passes: bool,
}

/// Boundedness of `‖<y>^{-3} e^{a y^2/4} xi‖∞ / beta^e`; `e = 3/2` is the
/// remainder law, larger `e` is a stricter envelope.
pub fn remainder_check(mtrace: &MajorantTrace, envelope_exponent: f64) -> RemainderReport {
    let series: Vec<f64> = mtrace
        .records
        .iter()
        .map(|r| normalised(r.xi_n3, r.beta.powf(envelope_exponent)))
        .collect();
    let m = InequalityMonitor::from_series("remainder", &series, tau_span(mtrace));
    RemainderReport {
        envelope_exponent,
        max_ratio: m.max_constant,
        first_half_max: m.first_half_max,
        trailing_half_max: m.trailing_half_max,
        passes: !series.is_empty() && !m.diverging,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaConsistency {
    /// `max |b_tau(FD) - (b_tau(model) - Gamma_2)|`.
    pub max_defect: f64,
    /// Twice the largest gap between the two- and four-stride differences.
    pub truncation: f64,
    pub passes: bool,
}

/// Rebuilds `b_tau` from the leading-order law plus the measured `Gamma_2`
/// and compares with the finite difference.
pub fn gamma_consistency(mtrace: &MajorantTrace) -> GammaConsistency {
    let p = mtrace.p;
    let recs = &mtrace.records;
    let n = recs.len();
    let kappa = 4.0 * p / (p - 1.0).powi(2);
    let mut max_defect: f64 = 0.0;
    let mut truncation: f64 = 0.0;
    for (k, r) in recs.iter().enumerate() {
        let model = -r.b * (r.a - 0.5 + 2.0 * r.b / (1.0 - p)) + kappa * r.b * r.b;
        max_defect = max_defect.max((r.b_tau - (model - r.gamma2)).abs());
        if k >= 2 && k + 2 < n {
            let wide = (recs[k + 2].b - recs[k - 2].b) / (recs[k + 2].tau - recs[k - 2].tau);
            truncation = truncation.max((wide - r.b_tau).abs());
        }
    }
    let scale = recs.iter().fold(0.0f64, |m, r| m.max(r.b_tau.abs()));
    GammaConsistency {
        max_defect,
        truncation: 2.0 * truncation,
        passes: max_defect <= 2.0 * truncation + 1e-12 * scale.max(1.0),
    }
}
