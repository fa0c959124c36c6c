//! End-to-end runs of the `quench` binary.

use std::path::Path;
use std::process::{Command, Output};

fn quench(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quench"))
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Lines of a CSV file after the `#` header block.
fn csv_body(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[test]
fn homogeneous_direct_run_hits_the_closed_form_quench_time() {
    let dir = tempfile::tempdir().unwrap();
    // b0 = 0, c0 = 1 and no perturbation give u0 = 1 at p = -1.
    let o = quench(&["simulate-direct", "--b0", "0", "--c0", "1", "--p", "-1"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let q = json(&dir.path().join("quench.json"));
    let t_star = q["report"]["t_star"].as_f64().unwrap();
    assert!((t_star - 0.5).abs() < 1e-4, "{t_star}");
    assert_eq!(q["config"]["c0"], "1");
    let body = csv_body(&dir.path().join("direct_trace.csv"));
    assert_eq!(body[0], "t,u_min,quench_flag");
    assert!(body.last().unwrap().ends_with(",1"));
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["files"].as_array().unwrap().len(), 2);
}

#[test]
fn snapshots_are_written_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let o = quench(&["simulate-direct", "--grid-n", "101", "--grid-l", "10", "--snapshot-every", "200"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let body = csv_body(&dir.path().join("snapshot_0.csv"));
    assert_eq!(body[0], "y,value");
    assert_eq!(body.len(), 102);
}

#[test]
fn default_direct_run_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let o = quench(&["simulate-direct"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn invalid_configuration_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = quench(&["simulate-direct", "--c0", "3"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("1/2 <= c0 <= 2"), "{}", stderr(&o));

    let o = quench(&["verify", "everything"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("unknown suite"));

    let o = quench(&["simulate-rescaled", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(3));

    let o = quench(&["simulate-rescaled", "--p", "0.5"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "# homogeneous\np = -2\nb0 = 0\nc0 = 1\ntau_max = 7\n").unwrap();
    let o = quench(&["simulate-direct", "--config", file.to_str().unwrap(), "--p", "-1"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let q = json(&dir.path().join("quench.json"));
    assert_eq!(q["config"]["p"], "-1");
    assert_eq!(q["config"]["tau_max"], "7");
    assert!((q["report"]["t_star"].as_f64().unwrap() - 0.5).abs() < 1e-4);

    std::fs::write(&file, "colour = blue\n").unwrap();
    let o = quench(&["simulate-direct", "--config", file.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn zero_length_rescaled_run_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let o = quench(&["simulate-rescaled", "--tau-max", "0"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let body = csv_body(&dir.path().join("majorant_trace.csv"));
    assert_eq!(body[0], "tau,t,lambda,a,b,M1,M2,Mq,A,B,beta,Gamma1,Gamma2,v_min");
    assert_eq!(body.len(), 2);
    let fit = json(&dir.path().join("fit_report.json"));
    assert!(fit["report"]["lambda_exponent"].is_null());
    for name in ["rescaled_trace.csv", "diagnostics.json", "manifest.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn identical_configs_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["simulate-rescaled", "--tau-max", "1", "--delta0", "0.1", "--perturbation", "gaussian-bump"];
    assert_eq!(quench(&args, a.path()).status.code(), Some(0));
    assert_eq!(quench(&args, b.path()).status.code(), Some(0));
    for name in ["rescaled_trace.csv", "majorant_trace.csv", "fit_report.json", "diagnostics.json", "manifest.json"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
}

#[test]
fn violated_hypotheses_abort_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = quench(&["simulate-rescaled", "--delta0", "1", "--perturbation", "gaussian-bump"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let d = json(&dir.path().join("diagnostics.json"));
    assert!(d["report"]["abort"]["tau"].as_f64().unwrap() > 0.0);
}

#[test]
fn verify_suites_report_and_fail_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let o = quench(&["verify", "heat"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = json(&dir.path().join("verify_heat.json"));
    let results = v["report"].as_array().unwrap();
    assert!(results.iter().all(|r| r["passed"] == true));
    assert!(results.iter().any(|r| r["name"] == "duhamel-vs-imex"));

    let o = quench(&["verify", "splitting", "--l-y", "2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("FAIL quadrature-tolerance"), "{}", stderr(&o));
}

#[test]
fn empty_sweep_succeeds_with_an_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = quench(&["sweep", "--p-values", ""], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let body = csv_body(&dir.path().join("sweep.csv"));
    assert_eq!(body.len(), 1);
    assert!(body[0].starts_with("cell,p,b0,delta0,exit_code"));
}

#[test]
fn single_cell_sweep_matches_the_direct_command() {
    let sweep_dir = tempfile::tempdir().unwrap();
    let run_dir = tempfile::tempdir().unwrap();
    let o = quench(&["sweep", "--tau-max", "1", "--p-values", "-2", "--b0-values", "0.02"], sweep_dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = quench(&["simulate-rescaled", "--tau-max", "1", "--p", "-2", "--b0", "0.02"], run_dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cell = sweep_dir.path().join("cell_000");
    for name in ["rescaled_trace.csv", "majorant_trace.csv", "fit_report.json", "diagnostics.json", "manifest.json"] {
        let x = std::fs::read(cell.join(name)).unwrap();
        let y = std::fs::read(run_dir.path().join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
    let body = csv_body(&sweep_dir.path().join("sweep.csv"));
    assert_eq!(body.len(), 2);
    assert!(body[1].starts_with("0,-2,0.02,"));
}
