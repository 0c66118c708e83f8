use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nuvmpc::scalar_lab::em_threshold;
use serde_json::Value;
use tempfile::TempDir;

fn nuvmpc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nuvmpc"))
        .args(args)
        .current_dir(dir)
        .env_remove("NUVMPC_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn summary(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}_summary.json"))).unwrap()).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).expect("column present");
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

/// Exit status 0 must mean converged and 2 must mean not converged.
fn assert_exit_matches(out: &Output, summary: &Value) {
    let code = out.status.code().unwrap();
    let converged = summary["converged"].as_bool().unwrap();
    assert_eq!(code, if converged { 0 } else { 2 }, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dac_run_writes_one_row_per_step() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "dac.json", r#"{"kind": "dac"}"#);
    let out = nuvmpc(&["run", &cfg, "--out-dir", "out"], tmp.path());
    let dir = tmp.path().join("out");
    let s = summary(&dir, "dac");
    assert_exit_matches(&out, &s);
    let csv = fs::read_to_string(dir.join("dac_trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 451);
    assert!(csv.starts_with("k,u,y,x0,x1,x2\n"));
    assert_eq!(s["manifest"]["config_path"], "dac.json");
    assert_eq!(s["manifest"]["tool_version"], env!("CARGO_PKG_VERSION"));
    assert!(s["metrics"]["max_distance_to_level"].is_number());
}

#[test]
fn corridor_version_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "corridor.json", r#"{"kind": "corridor", "version": 1}"#);
    let out = nuvmpc(&["run", "--config", &cfg, "--version", "4", "--max-iters", "25000", "--out-dir", "."], tmp.path());
    let s = summary(tmp.path(), "corridor");
    assert_exit_matches(&out, &s);
    assert_eq!(s["config"]["version"], 4);
    assert_eq!(s["config"]["iake"]["max_iters"], 25000);
    let u = column(&fs::read_to_string(tmp.path().join("corridor_trace.csv")).unwrap(), "u");
    assert_eq!(u.len(), 175);
    assert!(u.iter().all(|v| v.abs() <= 1.0 + 1e-3));
    // a few inputs stay between levels; see the README's known limitations
    let on_level = u.iter().filter(|v| [-1.0, 0.0, 1.0].iter().any(|l| (*v - l).abs() <= 1e-3)).count();
    assert!(on_level >= 160, "{on_level}/175 inputs on a level");
}

#[test]
fn version_flag_is_rejected_for_other_scenarios() {
    let tmp = TempDir::new().unwrap();
    let out = nuvmpc(&["run", "--scenario", "dac", "--version", "4", "--out-dir", "out"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn malformed_json_fails_without_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "bad.json", "{\"kind\": \"dac\",\n \"horizon\": 450,,}");
    let out = nuvmpc(&["run", &cfg, "--out-dir", "out", "--svg"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn unknown_fields_are_reported_by_name() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "typo.json", r#"{"kind": "obstacle", "horizn": 40}"#);
    let out = nuvmpc(&["run", &cfg, "--out-dir", "out"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizn"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn invalid_values_fail_validation() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "short.json", r#"{"kind": "dac", "horizon": 5, "target": {"type": "samples", "values": [0.1]}}"#);
    let out = nuvmpc(&["run", &cfg, "--out-dir", "out"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("samples"));
}

#[test]
fn same_seed_gives_identical_traces() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "rand.json",
        r#"{"kind": "dac", "horizon": 60, "target": {"type": "random_band_limited", "seed": 5}}"#,
    );
    let run = |seed: &str, dir: &str| {
        nuvmpc(&["run", &cfg, "--seed", seed, "--out-dir", dir], tmp.path());
        fs::read(tmp.path().join(dir).join("dac_trace.csv")).unwrap()
    };
    let a = run("7", "a");
    let b = run("7", "b");
    let c = run("8", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let s = summary(&tmp.path().join("a"), "dac");
    assert_eq!(s["manifest"]["seed"], 7);
    assert_eq!(s["config"]["target"]["seed"], 7);
}

#[test]
fn planar_scenarios_plot_the_path_and_obstacles() {
    let tmp = TempDir::new().unwrap();
    let out = nuvmpc(&["run", "--scenario", "obstacle", "--svg", "--out-dir", "."], tmp.path());
    assert_exit_matches(&out, &summary(tmp.path(), "obstacle"));
    let svg = fs::read_to_string(tmp.path().join("obstacle.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("<polygon"));
    assert!(svg.contains("<polyline"));
}

#[test]
fn empty_mu_range_gives_a_header_only_csv() {
    let tmp = TempDir::new().unwrap();
    let out = nuvmpc(&["scalar-sweep", "--prior", "box", "--a=-1", "--b", "1", "--s2", "0.5", "--mu", "0:1:0"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(tmp.path().join("scalar_sweep.csv")).unwrap(), "mu,s2,x_hat,iterations,converged\n");
}

#[test]
fn em_sweep_is_a_two_level_staircase() {
    let tmp = TempDir::new().unwrap();
    let out = nuvmpc(
        &["scalar-sweep", "--prior", "binarizing-em", "--a", "0", "--b", "1", "--s2", "0.3", "--mu=-0.5:1.5:40", "--max-iters", "200000", "--tol", "1e-13"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(tmp.path().join("scalar_sweep.csv")).unwrap();
    let mu = column(&csv, "mu");
    let x = column(&csv, "x_hat");
    assert_eq!(mu.len(), 40);
    // above the threshold for its mean the estimate lands on the nearer level
    for (m, x) in mu.iter().zip(&x) {
        let nearer = if *m < 0.5 { 0.0 } else { 1.0 };
        if em_threshold(0.0, 1.0, *m) < 0.3 {
            assert!((x - nearer).abs() < 1e-3, "mu {m}: x {x}");
        } else {
            assert!(*x > 1e-3 && *x < 1.0 - 1e-3, "mu {m}: x {x}");
        }
    }
    assert!(x.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn box_sweep_clamps_into_the_box() {
    let tmp = TempDir::new().unwrap();
    let out = nuvmpc(
        &["scalar-sweep", "--prior", "box", "--a=-1", "--b", "1", "--gamma", "1", "--s2", "1,2", "--mu=-3:3:61"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(tmp.path().join("scalar_sweep.csv")).unwrap();
    let (mu, x, s2) = (column(&csv, "mu"), column(&csv, "x_hat"), column(&csv, "s2"));
    assert_eq!(mu.len(), 122);
    for i in 0..mu.len() {
        assert!(x[i].abs() <= 1.0 + 1e-3, "mu {} s2 {}: x {}", mu[i], s2[i], x[i]);
        if mu[i].abs() < 0.9 {
            assert!((x[i] - mu[i]).abs() < 1e-3, "mu {}: x {}", mu[i], x[i]);
        }
        if i > 0 && s2[i] == s2[i - 1] {
            assert!(x[i] >= x[i - 1] - 1e-9);
        }
    }
}

#[test]
fn verify_passes_and_detects_an_injected_fault() {
    let tmp = TempDir::new().unwrap();
    let ok = nuvmpc(&["verify", "--skip-timing"], tmp.path());
    let table = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(ok.status.code(), Some(0), "{table}");
    assert_eq!(table.matches("PASS").count(), 3, "{table}");

    let bad = nuvmpc(&["verify", "--skip-timing", "--inject-fault"], tmp.path());
    assert_ne!(bad.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("thresholds         FAIL"));
}

#[test]
fn export_model_prints_the_linear_model() {
    let tmp = TempDir::new().unwrap();
    let out = nuvmpc(&["export-model", "--scenario", "dac"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["dims"]["horizon"], 450);
    assert_eq!(doc["dims"]["n"], 3);

    let out = nuvmpc(&["export-model", "--scenario", "corridor", "--out-dir", "m"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(tmp.path().join("m/corridor_model.json").exists());
}

#[test]
fn thread_cap_must_be_positive() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nuvmpc"))
        .args(["export-model", "--scenario", "dac"])
        .current_dir(tmp.path())
        .env("NUVMPC_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("NUVMPC_THREADS"));
}
