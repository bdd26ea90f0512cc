use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use voi_twin_cli::exit;

fn voi_twin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voi-twin")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = voi_twin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn assert_hashes(manifest_path: &Path) {
    let m = manifest(manifest_path);
    let dir = manifest_path.parent().unwrap();
    let artifacts = m["artifacts"].as_object().unwrap();
    assert!(!artifacts.is_empty());
    for (name, hash) in artifacts {
        let digest = hex::encode(Sha256::digest(std::fs::read(dir.join(name)).unwrap()));
        assert_eq!(hash.as_str().unwrap(), digest, "{name}");
    }
}

#[test]
fn sweep_writes_one_row_per_threshold() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["sweep", "--thresholds", "0.1,0.3,0.5", "--episodes", "2", "--seed", "1", "--out", &s(dir.path())]);
    let mut reader = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "measured_rmse"));
    let thresholds: Vec<f64> = reader.records().map(|r| r.unwrap()[0].parse().unwrap()).collect();
    assert_eq!(thresholds, vec![0.1, 0.3, 0.5]);
    let m = manifest(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "sweep");
    assert_eq!(m["seed"], 1);
    assert_hashes(&dir.path().join("manifest.json"));
}

#[test]
fn simulate_writes_traces_and_hashes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "--seed", "3", "--out", &s(dir.path())]);
    for f in ["metrics.csv", "beliefs.csv", "schedules.csv", "uwb.csv", "imu.csv", "summary.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let rows = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap().records().count();
    assert_eq!(rows, 300);
    assert_hashes(&dir.path().join("manifest.json"));

    let json = dir.path().join("json");
    ok(&["simulate", "--seed", "3", "--format", "json", "--out", &s(&json)]);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(json.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["n_qis"], 300);
}

#[test]
fn different_seeds_give_different_traces() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "--seed", "1", "--out", &s(&dir.path().join("a"))]);
    ok(&["simulate", "--seed", "2", "--out", &s(&dir.path().join("b"))]);
    let read = |d: &str| std::fs::read(dir.path().join(d).join("uwb.csv")).unwrap();
    assert_ne!(read("a"), read("b"));
}

#[test]
fn compare_reports_both_schemes_and_a_cdf() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["compare", "--episodes", "2", "--out", &s(dir.path())]);
    let schemes: Vec<String> = csv::Reader::from_path(dir.path().join("compare.csv"))
        .unwrap()
        .records()
        .map(|r| r.unwrap()[0].to_string())
        .collect();
    assert_eq!(schemes, vec!["voi", "greedy"]);
    let mut last = std::collections::HashMap::new();
    for r in csv::Reader::from_path(dir.path().join("cdf.csv")).unwrap().records() {
        let r = r.unwrap();
        last.insert(r[0].to_string(), r[2].parse::<f64>().unwrap());
    }
    assert_eq!(last["voi"], 1.0);
    assert_eq!(last["greedy"], 1.0);
    assert_hashes(&dir.path().join("manifest.json"));
}

#[test]
fn gnn_eval_reproduces_training_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let model = dir.path().join("model.json");
    ok(&["dataset-gen", "--samples", "120", "--seed", "5", "--out", &s(&data)]);
    let train = ok(&["gnn-train", "--data", &s(&data), "--out", &s(&model), "--seed", "9", "--max-epochs", "4"]);
    let report: serde_json::Value = serde_json::from_slice(&train.stdout).unwrap();
    assert_eq!(report["epochs"], 4);

    let eval = ok(&["gnn-eval", "--model", &s(&model), "--data", &s(&data)]);
    let eval: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(eval["samples"], 120);
    for key in ["train_rmse_m", "val_rmse_m"] {
        let (a, b) = (eval[key].as_f64().unwrap(), report[key].as_f64().unwrap());
        assert!((a - b).abs() < 1e-9, "{key}: {a} vs {b}");
    }
    let history = csv::Reader::from_path(dir.path().join("model.json.history.csv")).unwrap().records().count();
    assert_eq!(history, 4);
    assert_hashes(&dir.path().join("model.json.manifest.json"));
}

#[test]
fn replay_consumes_simulated_traces() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--seed", "4", "--out", &s(&sim)]);
    let out = dir.path().join("replay");
    ok(&["replay", "--seed", "4", "--uwb", &s(&sim.join("uwb.csv")), "--imu", &s(&sim.join("imu.csv")), "--out", &s(&out)]);
    let beliefs = csv::Reader::from_path(out.join("beliefs.csv")).unwrap().records().count();
    let simulated = csv::Reader::from_path(sim.join("beliefs.csv")).unwrap().records().count();
    assert_eq!(beliefs, simulated);
    assert_hashes(&out.join("manifest.json"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(voi_twin(&["--help"]).status.code(), Some(exit::OK));
    assert_eq!(voi_twin(&["--version"]).status.code(), Some(exit::OK));
    assert_eq!(voi_twin(&["simulate", "--bogus"]).status.code(), Some(exit::USAGE));
    assert_eq!(voi_twin(&["frobnicate"]).status.code(), Some(exit::USAGE));
    assert_eq!(voi_twin(&["sweep", "--thresholds", "abc"]).status.code(), Some(exit::USAGE));

    let missing = dir.path().join("nope.json");
    assert_eq!(voi_twin(&["simulate", "--config", &s(&missing)]).status.code(), Some(exit::MISSING_FILE));
    assert_eq!(
        voi_twin(&["gnn-eval", "--model", &s(&missing), "--data", &s(&missing)]).status.code(),
        Some(exit::MISSING_FILE)
    );

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(voi_twin(&["simulate", "--config", &s(&bad)]).status.code(), Some(exit::BAD_CONFIG));
    std::fs::write(&bad, r#"{"n_qis": 0}"#).unwrap();
    assert_eq!(voi_twin(&["simulate", "--config", &s(&bad)]).status.code(), Some(exit::BAD_CONFIG));
    assert_eq!(
        voi_twin(&["sweep", "--thresholds", "0.2,0", "--out", &s(dir.path())]).status.code(),
        Some(exit::BAD_CONFIG)
    );
}

#[test]
fn scenario_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = voi_twin::ScenarioConfig { n_qis: 25, ..voi_twin::ScenarioConfig::reference() };
    let path = dir.path().join("scenario.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    ok(&["simulate", "--config", &s(&path), "--out", &s(dir.path())]);
    let rows = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap().records().count();
    assert_eq!(rows, 25);
    let m = manifest(&dir.path().join("manifest.json"));
    assert_eq!(m["config"]["n_qis"], 25);
}
