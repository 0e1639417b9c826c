use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_greenwave"))
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(args: &[&str], out: &Path) -> Output {
    let o = bin().args(args).arg("--out").arg(out).output().unwrap();
    assert!(
        o.status.success(),
        "greenwave {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

const ZERO_DEMAND: &str = r#"{
  "name": "empty",
  "model": {"n": 2, "link_length": [200], "link_speed": [10], "vehicle_length": 5, "h": 1.3},
  "theta0": [[30, 20], [25, 25]],
  "horizon": 300
}"#;

fn write_scenario(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("s.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn zero_demand_costs_nothing() {
    let dir = TempDir::new().unwrap();
    let s = write_scenario(dir.path(), ZERO_DEMAND);
    let o = run(&["simulate", "--scenario", s.to_str().unwrap()], &dir.path().join("out"));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["metrics"]["cost"].as_f64(), Some(0.0));
}

#[test]
fn paper_events_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let s = scenarios().join("paper-3x.json");
    let args = ["simulate", "--scenario", s.to_str().unwrap(), "--seed", "7", "--emit-events"];
    run(&args, &dir.path().join("a"));
    run(&args, &dir.path().join("b"));
    let a = std::fs::read(dir.path().join("a/events.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/events.csv")).unwrap();
    assert!(csv_rows(&dir.path().join("a/events.csv")) > 0);
    assert_eq!(a, b);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a/events.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"].as_u64(), Some(7));
    assert_eq!(m["command"].as_str(), Some("simulate"));
}

#[test]
fn missing_theta0_is_reported() {
    let dir = TempDir::new().unwrap();
    let text = ZERO_DEMAND.replace("\"theta0\": [[30, 20], [25, 25]],", "");
    let s = write_scenario(dir.path(), &text);
    let o = bin()
        .args(["simulate", "--scenario", s.to_str().unwrap(), "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("theta0"));
}

#[test]
fn online_run_logs_one_row_per_window() {
    let dir = TempDir::new().unwrap();
    let s = scenarios().join("paper-3x-online.json");
    run(
        &["optimize", "--scenario", s.to_str().unwrap(), "--mode", "online", "--window", "1500"],
        dir.path(),
    );
    assert_eq!(csv_rows(&dir.path().join("optimization.csv")), 28);
    assert!(dir.path().join("optimization.manifest.json").exists());
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn reverse_sweep_has_five_rows() {
    let dir = TempDir::new().unwrap();
    run(
        &["optimize", "--mode", "sweep", "--iterations", "2", "--replications", "2"],
        dir.path(),
    );
    assert_eq!(csv_rows(&dir.path().join("sweep.csv")), 5);
}

#[test]
fn zero_demand_validation_is_all_zero() {
    let dir = TempDir::new().unwrap();
    let s = write_scenario(dir.path(), ZERO_DEMAND);
    run(
        &["validate", "--scenario", s.to_str().unwrap(), "--replications", "3", "--fd-step", "0.1"],
        &dir.path().join("out"),
    );
    let text = std::fs::read_to_string(dir.path().join("out/validation.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("coordinate,ipa,fd,spread,order_change"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1].parse::<f64>().unwrap(), 0.0);
        assert_eq!(f[2].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn single_size_scalability_has_no_fit() {
    let dir = TempDir::new().unwrap();
    let o = run(&["scalability", "--ns", "1", "--repeats", "1"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 1);
    assert!(v["fit"].is_null());
    assert_eq!(csv_rows(&dir.path().join("scalability.csv")), 1);
}

#[test]
fn trace_writes_hops() {
    let dir = TempDir::new().unwrap();
    run(&["trace", "--param", "1"], dir.path());
    assert!(csv_rows(&dir.path().join("trace.csv")) > 0);
}

#[test]
fn bad_parameter_index_fails() {
    let dir = TempDir::new().unwrap();
    let o = bin().args(["trace", "--param", "9", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!o.status.success());
}
