use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_corner-scatter"))
}

fn minimal(experiments: &[&str]) -> Value {
    json!({
        "name": "cli-test",
        "geometry": {"kind": "minimal", "l1": 10, "l2": 8, "h": 1.0},
        "experiments": experiments,
        "seed": 3
    })
}

fn write(dir: &Path, name: &str, v: &Value) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(cfg: &Path, out: &Path) -> i32 {
    bin()
        .args(["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn passing_run_exits_zero_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.json", &minimal(&["assemble-audit"]));
    let out = dir.path().join("out");
    assert_eq!(run(&cfg, &out), 0);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["experiments"][0]["status"], "pass");
    assert!(out.join("assemble-audit/spectra.csv").exists());
}

#[test]
fn validate_accepts_shipped_configs() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["minimal", "reference", "two-well", "product"] {
        let st = bin()
            .args(["validate", configs.join(format!("{name}.json")).to_str().unwrap()])
            .status()
            .unwrap();
        assert_eq!(st.code(), Some(0), "{name}");
    }
}

#[test]
fn small_quadrature_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal(&["yafaev-audit"]);
    v["yafaev"] = json!({"q": 2});
    let cfg = write(dir.path(), "q2.json", &v);
    assert_eq!(run(&cfg, &dir.path().join("out")), 2);
    let st = bin().args(["validate", cfg.to_str().unwrap()]).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn schema_violations_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal(&["assemble-audit"]);
    v["unexpected"] = json!(1);
    assert_eq!(run(&write(dir.path(), "a.json", &v), &dir.path().join("a")), 2);
    let v = minimal(&["oracle-compare"]);
    assert_eq!(run(&write(dir.path(), "b.json", &v), &dir.path().join("b")), 2);
    let v = minimal(&["not-an-experiment"]);
    assert_eq!(run(&write(dir.path(), "c.json", &v), &dir.path().join("c")), 2);
    assert_eq!(run(&dir.path().join("missing.json"), &dir.path().join("d")), 2);
}

#[test]
fn failed_threshold_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal(&["assemble-audit"]);
    v["thresholds"] = json!({"hermiticity": -1.0});
    assert_eq!(run(&write(dir.path(), "t.json", &v), &dir.path().join("out")), 1);
}

#[test]
fn numerical_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal(&["mourre"]);
    v["options"] = json!({"mourre_width": 6.0, "projection_budget": 1});
    assert_eq!(run(&write(dir.path(), "n.json", &v), &dir.path().join("out")), 3);
}

#[test]
fn seed_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.json", &minimal(&["assemble-audit"]));
    let out = dir.path().join("out");
    let st = bin()
        .args(["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "99", "--threads", "1"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
}
