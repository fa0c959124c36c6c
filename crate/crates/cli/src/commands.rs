//! The four subcommands. Each returns an exit code; errors carry their own.

use crate::config::RunConfig;
use crate::output::{write_rows, OutputDir};
use crate::suites::{self, Suite};
use crate::{exit, CliError};
use quench_core::diagnostics::{
    comparison_check, fit_asymptotics, gamma_consistency, majorants, monitor_apriori, remainder_check,
    AprioriReport, ComparisonReport, FitReport, GammaConsistency, MajorantTrace, RemainderReport,
};
use quench_core::direct::{run_to_quench, DirectConfig, DirectTrace};
use quench_core::model::{generate_initial_data, normalize_initial_data};
use quench_core::rescaled::{evolve_rescaled, AbortInfo, RescaledConfig, RescaledTrace};
use quench_core::{Grid, InitialDataSpec};
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

/// Slack allowed below the comparison envelope.
pub const COMPARISON_TOLERANCE: f64 = 1e-6;
/// Envelope exponent of the remainder law.
pub const REMAINDER_EXPONENT: f64 = 1.5;
/// Fraction of sweep cells that must succeed.
pub const SWEEP_SUCCESS_FRACTION: f64 = 0.9;

fn initial_data_spec(cfg: &RunConfig) -> InitialDataSpec {
    InitialDataSpec {
        b0: cfg.b0,
        c0: cfg.c0,
        delta0: cfg.delta0,
        perturbation: cfg.perturbation,
        lambda0: cfg.lambda0,
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct QuenchSummary {
    pub t_star: Option<f64>,
    pub relative_residual: Option<f64>,
    pub fit_window: Option<usize>,
    pub low_confidence: Option<bool>,
    pub reached_floor: bool,
    pub steps: usize,
    pub t_final: f64,
    pub u_min_final: f64,
}

pub fn run_direct(cfg: &RunConfig) -> Result<DirectTrace, CliError> {
    let grid = Grid::new(cfg.grid_l, cfg.grid_n)?;
    let u0 = generate_initial_data(&initial_data_spec(cfg), cfg.p, grid)?;
    let dcfg = DirectConfig {
        p: cfg.p,
        dt_safety: cfg.dt_safety,
        stop_floor: cfg.stop_floor,
        ..Default::default()
    };
    Ok(run_to_quench(&u0, &dcfg)?)
}

pub fn quench_summary(trace: &DirectTrace) -> QuenchSummary {
    let est = trace.quench_estimate;
    QuenchSummary {
        t_star: est.map(|e| e.t_star),
        relative_residual: est.map(|e| e.relative_residual),
        fit_window: est.map(|e| e.window),
        low_confidence: est.map(|e| e.low_confidence),
        reached_floor: trace.reached_floor,
        steps: trace.steps,
        t_final: trace.last().t,
        u_min_final: trace.last().u_min,
    }
}

/// Direct run: `direct_trace.csv`, `quench.json`, and every `snapshot_every`-th
/// recorded field as `snapshot_<k>.csv` (0 disables snapshots).
pub fn simulate_direct(cfg: &RunConfig, snapshot_every: usize) -> Result<i32, CliError> {
    let trace = run_direct(cfg)?;
    let mut out = OutputDir::create(&cfg.output_dir, "simulate-direct", cfg)?;
    let last = trace.samples.len() - 1;
    out.write_csv("direct_trace.csv", |buf| {
        let rows: Vec<_> = trace
            .samples
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let flag = if k == last && trace.reached_floor { 1.0 } else { 0.0 };
                vec![Some(s.t), Some(s.u_min), Some(flag)]
            })
            .collect();
        write_rows(buf, &["t", "u_min", "quench_flag"], &rows)
    })?;
    if snapshot_every > 0 {
        for (k, s) in trace.samples.iter().enumerate().step_by(snapshot_every) {
            out.write_csv(&format!("snapshot_{k}.csv"), |buf| Ok(s.u.write_csv(buf)?))?;
        }
    }
    let summary = quench_summary(&trace);
    out.write_json("quench.json", &summary)?;
    out.finish()?;
    match summary.t_star {
        Some(t) => println!("t* = {t} (steps {}, floor reached: {})", trace.steps, trace.reached_floor),
        None => println!("no quench estimate (steps {})", trace.steps),
    }
    Ok(exit::OK)
}

// ---------------------------------------------------------------------------

/// Everything produced by one rescaled campaign.
#[derive(Debug, Clone)]
pub struct RescaledOutcome {
    pub trace: RescaledTrace,
    /// Initial reference curvature after normalisation.
    pub beta0: f64,
    pub majorants: MajorantTrace,
    pub apriori: AprioriReport,
    pub remainder: RemainderReport,
    pub gamma: GammaConsistency,
    pub comparison: ComparisonReport,
    pub fit: FitReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport<'a> {
    pub abort: Option<&'a AbortInfo>,
    pub beta0: f64,
    pub q: f64,
    pub mq_max: Option<f64>,
    pub apriori: &'a AprioriReport,
    pub remainder: &'a RemainderReport,
    pub gamma_consistency: &'a GammaConsistency,
    pub comparison: &'a ComparisonReport,
    pub failures: Vec<String>,
}

impl RescaledOutcome {
    /// Largest `M_q` along the run, when the `q` norm applies.
    pub fn mq_max(&self) -> Option<f64> {
        self.majorants.records.iter().filter_map(|r| r.mq).reduce(f64::max)
    }

    /// Violated invariants, by name.
    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self.apriori.diverging().iter().map(|n| format!("diverging:{n}")).collect();
        if self.comparison.min_slack < -COMPARISON_TOLERANCE {
            out.push("comparison".into());
        }
        if !self.remainder.passes {
            out.push("remainder".into());
        }
        out
    }

    pub fn exit_code(&self) -> i32 {
        if self.trace.abort.is_some() {
            exit::SOLVER_ABORT
        } else if !self.failures().is_empty() {
            exit::INVARIANT_FAILURE
        } else {
            exit::OK
        }
    }

    pub fn diagnostics(&self) -> DiagnosticsReport<'_> {
        DiagnosticsReport {
            abort: self.trace.abort.as_ref(),
            beta0: self.beta0,
            q: self.trace.q,
            mq_max: self.mq_max(),
            apriori: &self.apriori,
            remainder: &self.remainder,
            gamma_consistency: &self.gamma,
            comparison: &self.comparison,
            failures: self.failures(),
        }
    }
}

/// Generate, normalise, evolve, then measure.
pub fn run_rescaled(cfg: &RunConfig) -> Result<RescaledOutcome, CliError> {
    let grid = Grid::new(cfg.l_y, cfg.n_y())?;
    let u0 = generate_initial_data(&initial_data_spec(cfg), cfg.p, grid)?;
    let data = normalize_initial_data(&u0, cfg.b0, cfg.c0, cfg.delta0, cfg.p)?;
    let profile = data.profile(cfg.p)?;
    let rcfg = RescaledConfig {
        p: cfg.p,
        dtau: cfg.dtau,
        tau_max: cfg.tau_max,
        ..Default::default()
    };
    let trace = evolve_rescaled(&data.u, (profile.a(), profile.b()), cfg.lambda0, &rcfg)?;
    let mtrace = majorants(&trace)?;
    Ok(RescaledOutcome {
        beta0: data.beta,
        apriori: monitor_apriori(&mtrace),
        remainder: remainder_check(&mtrace, REMAINDER_EXPONENT),
        gamma: gamma_consistency(&mtrace),
        comparison: comparison_check(&trace, data.beta, profile.c(), cfg.p)?,
        fit: fit_asymptotics(&trace, None)?,
        majorants: mtrace,
        trace,
    })
}

/// `rescaled_trace.csv`, `majorant_trace.csv`, `fit_report.json`,
/// `diagnostics.json` and the manifest.
pub fn write_rescaled(outcome: &RescaledOutcome, cfg: &RunConfig, dir: &Path, command: &str) -> Result<(), CliError> {
    let mut out = OutputDir::create(dir, command, cfg)?;
    out.write_csv("rescaled_trace.csv", |buf| {
        let rows: Vec<_> = outcome
            .trace
            .samples
            .iter()
            .map(|s| {
                [s.tau, s.t, s.dt, s.lambda, s.a, s.b, s.v_min, s.xi_n2, s.xi_n3, s.xi_nq, s.residual_0, s.residual_2]
                    .into_iter()
                    .map(Some)
                    .chain([Some(s.newton_iters as f64)])
                    .collect()
            })
            .collect();
        let header = [
            "tau", "t", "dt", "lambda", "a", "b", "v_min", "xi_n2", "xi_n3", "xi_nq", "residual_0", "residual_2",
            "newton_iters",
        ];
        write_rows(buf, &header, &rows)
    })?;
    out.write_csv("majorant_trace.csv", |buf| Ok(outcome.majorants.write_csv(buf)?))?;
    out.write_json("fit_report.json", &outcome.fit)?;
    out.write_json("diagnostics.json", &outcome.diagnostics())?;
    out.finish()?;
    Ok(())
}

pub fn simulate_rescaled(cfg: &RunConfig) -> Result<i32, CliError> {
    let outcome = run_rescaled(cfg)?;
    write_rescaled(&outcome, cfg, &cfg.output_dir, "simulate-rescaled")?;
    let fit = &outcome.fit;
    println!(
        "t* = {} lambda exponent = {:?} c = {:?} b ln|t*-t| = {:?} (target {})",
        fit.t_star, fit.lambda_exponent, fit.c_limit, fit.b_log_constant, fit.b_log_target
    );
    if let Some(abort) = &outcome.trace.abort {
        eprintln!("aborted after tau = {}: {}", abort.tau, abort.reason);
    }
    for f in outcome.failures() {
        eprintln!("FAIL {f}");
    }
    Ok(outcome.exit_code())
}

// ---------------------------------------------------------------------------

pub fn verify(cfg: &RunConfig, suite: &str) -> Result<i32, CliError> {
    let suite: Suite = suite.parse()?;
    let results = suites::run(suite, cfg);
    let mut out = OutputDir::create(&cfg.output_dir, &format!("verify {suite}"), cfg)?;
    out.write_json(&format!("verify_{suite}.json"), &results)?;
    out.finish()?;
    let mut code = exit::OK;
    for r in &results {
        if r.passed {
            println!("PASS {}: {:e} (threshold {:e})", r.name, r.value, r.threshold);
        } else {
            eprintln!("FAIL {}: {}", r.name, r.detail);
            code = exit::INVARIANT_FAILURE;
        }
    }
    Ok(code)
}

// ---------------------------------------------------------------------------

/// Values swept per parameter; `None` keeps the template value.
#[derive(Debug, Clone, Default)]
pub struct SweepGrid {
    pub p: Option<Vec<f64>>,
    pub b0: Option<Vec<f64>>,
    pub delta0: Option<Vec<f64>>,
}

impl SweepGrid {
    /// Comma-separated list; an empty string is an empty list.
    pub fn parse_list(key: &str, text: &str) -> Result<Vec<f64>, CliError> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Config(format!("cannot parse `{s}` in {key} list"))))
            .collect()
    }

    /// Cell configurations in `p`-major order, each writing to `cell_<k>`.
    pub fn cells(&self, template: &RunConfig) -> Result<Vec<RunConfig>, CliError> {
        let axis = |v: &Option<Vec<f64>>, default: f64| v.clone().unwrap_or_else(|| vec![default]);
        let mut cells = Vec::new();
        for p in axis(&self.p, template.p) {
            for b0 in axis(&self.b0, template.b0) {
                for delta0 in axis(&self.delta0, template.delta0) {
                    let mut cfg = RunConfig { p, b0, delta0, ..template.clone() };
                    cfg.output_dir = template.output_dir.join(format!("cell_{:03}", cells.len()));
                    cfg.validate()?;
                    cells.push(cfg);
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub cell: usize,
    pub p: f64,
    pub b0: f64,
    pub delta0: f64,
    pub exit_code: i32,
    pub message: String,
    pub outcome: Option<RescaledOutcomeSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RescaledOutcomeSummary {
    pub last_tau: f64,
    pub t_star: f64,
    pub lambda_exponent: Option<f64>,
    pub c_limit: Option<f64>,
    pub b_log_constant: Option<f64>,
    pub b_log_extrapolated: Option<f64>,
    pub b_log_target: f64,
    pub mq_max: Option<f64>,
    pub comparison_min_slack: f64,
}

impl RescaledOutcomeSummary {
    pub fn of(o: &RescaledOutcome) -> Self {
        Self {
            last_tau: o.trace.samples.last().map_or(0.0, |s| s.tau),
            t_star: o.fit.t_star,
            lambda_exponent: o.fit.lambda_exponent,
            c_limit: o.fit.c_limit,
            b_log_constant: o.fit.b_log_constant,
            b_log_extrapolated: o.fit.b_log_extrapolated,
            b_log_target: o.fit.b_log_target,
            mq_max: o.mq_max(),
            comparison_min_slack: o.comparison.min_slack,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub cells: Vec<CellResult>,
    pub succeeded: usize,
    pub exit_code: i32,
}

fn run_cell(index: usize, cfg: &RunConfig) -> CellResult {
    let (exit_code, message, outcome) = match run_rescaled(cfg)
        .and_then(|o| write_rescaled(&o, cfg, &cfg.output_dir, "simulate-rescaled").map(|_| o))
    {
        Ok(o) => {
            let msg = match &o.trace.abort {
                Some(a) => format!("aborted after tau = {}: {}", a.tau, a.reason),
                None => o.failures().join(" "),
            };
            (o.exit_code(), msg, Some(RescaledOutcomeSummary::of(&o)))
        }
        Err(e) => (e.exit_code(), e.to_string(), None),
    };
    CellResult { cell: index, p: cfg.p, b0: cfg.b0, delta0: cfg.delta0, exit_code, message, outcome }
}

/// Runs every cell in parallel and writes `sweep.csv` once at the end.
pub fn sweep(template: &RunConfig, grid: &SweepGrid) -> Result<SweepSummary, CliError> {
    let cells = grid.cells(template)?;
    let results: Vec<CellResult> = cells.par_iter().enumerate().map(|(k, cfg)| run_cell(k, cfg)).collect();
    let succeeded = results.iter().filter(|r| r.exit_code == exit::OK).count();
    let exit_code = if results.is_empty() || succeeded as f64 >= SWEEP_SUCCESS_FRACTION * results.len() as f64 {
        exit::OK
    } else {
        exit::INVARIANT_FAILURE
    };

    let mut out = OutputDir::create(&template.output_dir, "sweep", template)?;
    out.write_csv("sweep.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record([
            "cell", "p", "b0", "delta0", "exit_code", "last_tau", "t_star", "lambda_exponent", "c_limit",
            "b_log_constant", "b_log_extrapolated", "b_log_target", "mq_max", "comparison_min_slack", "message",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &results {
            let o = r.outcome.as_ref();
            w.write_record([
                r.cell.to_string(),
                r.p.to_string(),
                r.b0.to_string(),
                r.delta0.to_string(),
                r.exit_code.to_string(),
                opt(o.map(|o| o.last_tau)),
                opt(o.map(|o| o.t_star)),
                opt(o.and_then(|o| o.lambda_exponent)),
                opt(o.and_then(|o| o.c_limit)),
                opt(o.and_then(|o| o.b_log_constant)),
                opt(o.and_then(|o| o.b_log_extrapolated)),
                opt(o.map(|o| o.b_log_target)),
                opt(o.and_then(|o| o.mq_max)),
                opt(o.map(|o| o.comparison_min_slack)),
                r.message.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.finish()?;
    Ok(SweepSummary { cells: results, succeeded, exit_code })
}
