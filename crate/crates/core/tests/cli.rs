//! End-to-end checks of the `diffsim` binary.

use std::path::Path;
use std::process::{Command, Output};

const GRID_CONFIG: &str = "\
topology.kind = grid
topology.K = 9
problem.family = ls
problem.M = 3
problem.lambda_range = 0.25, 0.5
methods = diffusion, exact_diffusion
mu = 0.005
iterations = 1500
runs = 4
seed = 3
";

fn diffsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffsim"))
        .args(args)
        .env("DIFFSIM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value_of(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no '{key}' in:\n{report}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn run_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grid.cfg", GRID_CONFIG);
    let out = dir.path().join("out/grid.csv");
    let o = diffsim(&["run", &cfg, "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "iteration,diffusion_msd_db,diffusion_stderr_db,exact_diffusion_msd_db,exact_diffusion_stderr_db"
    );
    assert_eq!(csv.lines().count(), 1501);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    for key in ["config_digest", "lambda", "gap", "nu", "delta", "b_sq", "sigma_sq", "msd_theory_db", "regime"] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
    assert_eq!(summary["config_digest"].as_str().unwrap().len(), 64);
    let methods = summary["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 2);
    assert!(methods.iter().all(|m| m["steady_state_db"].is_f64() && m["steady_state_stderr_db"].is_f64()));
}

#[test]
fn identical_runs_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grid.cfg", GRID_CONFIG);
    let mut files = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let out = dir.path().join(name);
        assert!(diffsim(&["run", &cfg, "--output", out.to_str().unwrap()]).status.success());
        files.push((std::fs::read(&out).unwrap(), std::fs::read(out.with_extension("json")).unwrap()));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn topology_reports_quartered_cycle_gap() {
    let g20 = value_of(&stdout(&diffsim(&["topology", "--kind", "cycle", "--K", "20"])), "gap");
    let g40 = value_of(&stdout(&diffsim(&["topology", "--kind", "cycle", "--K", "40"])), "gap");
    let ratio = g20 / g40;
    assert!((3.6..=4.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn topology_writes_matrix_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.csv");
    let o = diffsim(&["topology", "--kind", "cycle", "--K", "4", "--csv", path.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 4);
    let lambda = value_of(&stdout(&o), "lambda");
    assert!((lambda - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn theory_prints_text_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grid.cfg", GRID_CONFIG);
    let text = stdout(&diffsim(&["theory", &cfg]));
    assert!(value_of(&text, "msd_theory_db") < 0.0);
    assert!(text.contains("regime.regime = "));
    let json = diffsim(&["theory", &cfg, "--json", "--mu", "0.01"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["mu"].as_f64(), Some(0.01));
}

#[test]
fn sweep_writes_one_csv_per_point_and_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grid.cfg", GRID_CONFIG);
    let out = dir.path().join("s.csv");
    let o = diffsim(&["sweep", &cfg, "--vary", "mu", "--values", "0.005,0.01", "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("s_mu=0.005.csv").exists());
    assert!(dir.path().join("s_mu=0.01.json").exists());
    let table = std::fs::read_to_string(dir.path().join("s_sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert_eq!(stdout(&o), table);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let no_methods = write_config(dir.path(), "empty.cfg", &GRID_CONFIG.replace("methods = diffusion, exact_diffusion", "methods ="));
    let no_kind = write_config(dir.path(), "nokind.cfg", &GRID_CONFIG.replace("topology.kind = grid\n", ""));
    for args in [
        vec!["run", no_methods.as_str()],
        vec!["run", no_kind.as_str()],
        vec!["run", "/nonexistent/config"],
        vec!["topology", "--kind", "cycle", "--K", "4", "--bogus"],
        vec!["topology", "--kind", "hexagon", "--K", "4"],
        vec!["frobnicate"],
        vec![],
    ] {
        let o = diffsim(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
    }
    let o = diffsim(&["run", &no_kind]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("topology.kind"));
}

#[test]
fn divergence_exits_two_but_keeps_other_methods() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "div.cfg",
        &format!("{GRID_CONFIG}method.diffusion.mu = 100\n"),
    );
    let out = dir.path().join("div.csv");
    let o = diffsim(&["run", &cfg, "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("diverged"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert!(summary["methods"][0]["diverged"].is_object());
    assert!(summary["methods"][1]["steady_state_db"].is_f64());
}
