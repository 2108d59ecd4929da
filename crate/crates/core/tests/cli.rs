mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hetcoef::simulate::{DependenceShape, DgpConfig};
use serde_json::Value;

fn hetcoef(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetcoef"))
        .args(args)
        .env_remove("HETCOEF_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, config: &DgpConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_csv_and_truth_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::triangular(&[(0.0, 1.0), (1.0, 1.0)], vec![1.0, 2.0], 1.0, 0.3);
    let cfg_path = write_config(dir.path(), "dgp.json", &cfg);
    let out = dir.path().join("data.csv");
    let o = hetcoef(&["simulate", "--config", s(&cfg_path), "--n", "1000", "--seed", "7", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1001);
    assert_eq!(text.lines().next().unwrap(), "y,x,z");
    let truth: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data.truth.json")).unwrap()).unwrap();
    assert_eq!(truth["schema_version"], 1);
    assert_eq!(truth["truth"]["mean_epsilon"], serde_json::json!([1.0, 2.0]));

    // idempotent given the seed
    let again = dir.path().join("again.csv");
    hetcoef(&["simulate", "--config", s(&cfg_path), "--n", "1000", "--seed", "7", "--out", s(&again)]);
    assert_eq!(text, std::fs::read_to_string(&again).unwrap());
}

#[test]
fn control_then_estimate_and_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::triangular(&[(0.0, 1.0), (1.0, 1.0)], vec![1.0, 2.0], 1.0, 0.3);
    let cfg_path = write_config(dir.path(), "dgp.json", &cfg);
    let data = dir.path().join("data.csv");
    hetcoef(&["simulate", "--config", s(&cfg_path), "--n", "4000", "--out", s(&data)]);

    let with_v = dir.path().join("with_v.csv");
    let o = hetcoef(&["control", "--input", s(&data), "--out", s(&with_v)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&with_v).unwrap().lines().next().unwrap(), "y,x,z,v");

    let fit_path = dir.path().join("fit.json");
    let asf_csv = dir.path().join("asf.csv");
    let o = hetcoef(&[
        "estimate", "--input", s(&data), "--p", "power:2", "--psi", "power:2",
        "--asf-x", "0,1", "--out", s(&fit_path), "--asf-csv", s(&asf_csv),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let fit: Value = serde_json::from_str(&std::fs::read_to_string(&fit_path).unwrap()).unwrap();
    assert_eq!(fit["schema_version"], 1);
    assert_eq!(fit["control_source"], "instrument");
    let asf0 = fit["asf"][0]["asf"].as_f64().unwrap();
    let asf1 = fit["asf"][1]["asf"].as_f64().unwrap();
    assert!((asf1 - asf0 - 2.0).abs() < 0.2, "{asf0} {asf1}");
    assert_eq!(std::fs::read_to_string(&asf_csv).unwrap().lines().count(), 3);

    let o = hetcoef(&["diagnose", "--input", s(&data), "--p", "power:2", "--bins", "10"]);
    assert_eq!(o.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["overall_verdicts"]["instrument_support"]["status"], "pass");
    assert_eq!(report["overall_verdicts"]["binary_instrument"]["status"], "pass");
}

#[test]
fn estimate_exits_three_on_support_cardinality_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::triangular(&[(0.0, 1.0), (1.0, 1.0)], vec![1.0, 2.0, 0.5], 1.0, 0.3);
    let cfg_path = write_config(dir.path(), "dgp.json", &cfg);
    let data = dir.path().join("data.csv");
    hetcoef(&["simulate", "--config", s(&cfg_path), "--n", "4000", "--out", s(&data)]);
    let fit_path = dir.path().join("fit.json");
    let o = hetcoef(&[
        "estimate", "--input", s(&data), "--p", "power:3", "--psi", "indicator:4",
        "--ridge", "0", "--out", s(&fit_path),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("distinct instrument quantile"), "{stderr}");
    // nothing written on error
    assert!(!fit_path.exists());
}

#[test]
fn diagnose_reports_overlap_failure_with_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    // an affine propensity leaving [0, 1] is rejected up front
    let mut cfg = common::binary(vec![1.0, 2.0], 1.0, 0.5, DependenceShape::Linear);
    cfg.propensity[0] = hetcoef::simulate::Affine { intercept: -0.5, slope: 3.0 };
    let cfg_path = dir.path().join("dgp.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let data = dir.path().join("data.csv");
    let o = hetcoef(&["simulate", "--config", s(&cfg_path), "--n", "2000", "--out", s(&data)]);
    assert_eq!(o.status.code(), Some(1), "out-of-range propensity is a config error");

    // hand-built: x = 1 whenever v > 0.9
    let mut text = String::from("y,x,v\n");
    for i in 0..2000 {
        let v = (i as f64 + 0.5) / 2000.0;
        let x = if v > 0.9 || i % 2 == 0 { 1 } else { 0 };
        text.push_str(&format!("{},{x},{v}\n", 1.0 + 2.0 * x as f64));
    }
    std::fs::write(&data, text).unwrap();
    let out = dir.path().join("diag.json");
    let profile = dir.path().join("profile.csv");
    let o = hetcoef(&[
        "diagnose", "--input", s(&data), "--p", "power:2", "--bins", "10",
        "--out", s(&out), "--profile", s(&profile),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["overall_verdicts"]["overlap"]["status"], "fail");
    assert_eq!(report["overall_verdicts"]["variance_identity"]["status"], "pass");
    assert_eq!(std::fs::read_to_string(&profile).unwrap().lines().count(), 11);
}

#[test]
fn mc_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let dgp = common::binary(vec![1.0, 2.0], 1.0, 0.5, DependenceShape::Linear);
    let cfg = serde_json::json!({
        "dgp": dgp,
        "p": {"kind": "power", "dim": 2},
        "psi": [{"kind": "power", "dim": 2}],
        "n_grid": [500],
        "replications": 5,
        "base_seed": 3,
        "x_grid": [0.0, 1.0]
    });
    let cfg_path = dir.path().join("mc.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = dir.path().join("mc.csv");
    let summary = dir.path().join("mc.json.out");
    let o = hetcoef(&["--threads", "2", "mc", "--config", s(&cfg_path), "--out", s(&out), "--summary", s(&summary)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 3);

    // HETCOEF_THREADS is the fallback and results do not depend on it
    let out2 = dir.path().join("mc2.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_hetcoef"))
        .args(["mc", "--config", s(&cfg_path), "--out", s(&out2), "--summary", s(&dir.path().join("s2.json"))])
        .env("HETCOEF_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(csv, std::fs::read_to_string(&out2).unwrap());
}

#[test]
fn usage_and_data_errors() {
    assert_eq!(hetcoef(&[]).status.code(), Some(2));
    assert_eq!(hetcoef(&["estimate", "--input", "x.csv"]).status.code(), Some(2));
    assert_eq!(
        hetcoef(&["diagnose", "--input", "x.csv", "--p", "wavelet:3"]).status.code(),
        Some(2)
    );
    assert_eq!(hetcoef(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "y,x\n1,2\nnot,a number\n").unwrap();
    let o = hetcoef(&["estimate", "--input", s(&bad), "--p", "power:2", "--psi", "power:2"]);
    assert_eq!(o.status.code(), Some(1));
}
