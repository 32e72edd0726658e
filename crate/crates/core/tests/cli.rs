use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"{"schema_version":1,"seed":1,"data":{"n_patients":6,"slices_per_patient":2},"pretrain":{"epochs":3},"search":{"warmup_epochs":2,"max_epochs":30},"final_training":{"epochs":3}}"#;

fn cellsearch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellsearch"))
        .args(args)
        .env("CELLSEARCH_THREADS", "1")
        .output()
        .expect("spawn cellsearch")
}

fn ok(args: &[&str]) -> Value {
    let out = cellsearch(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary json")
}

fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("wall_time_secs");
            m.remove("speed_up");
            m.values_mut().for_each(strip_timing);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn pipeline(dir: &Path) -> Value {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.join("run");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().chain(&common).map(|s| s.to_string()).collect() };
    let call = |cmd: &[&str]| {
        let args = with(cmd);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    call(&["gen-data"]);
    call(&["pretrain"]);
    let lth = call(&["search", "--mode", "lth"]);
    assert_eq!(lth["converged"], true);
    let base = call(&["search", "--mode", "baseline"]);
    assert_eq!(base["epochs_used"], 30);
    call(&["train-final", "--mode", "lth", "--init", "lth_reset"]);
    call(&["train-final", "--mode", "baseline", "--init", "lth_reset"]);
    let an = call(&[
        "analyze",
        "--mode",
        "baseline",
        "--checkpoints",
        "3,10,30",
        "--similarity",
        "final",
        "--representation",
        "top2",
    ]);
    let csv = std::fs::read_to_string(an["similarity"].as_str().unwrap()).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows[0], ["epoch", "3", "10", "30"]);
    for (i, row) in rows[1..].iter().enumerate() {
        assert_eq!(row[i + 1].parse::<f64>().unwrap(), 1.0);
    }
    let vectors: Value =
        serde_json::from_str(&std::fs::read_to_string(an["vectors"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(vectors["30"].as_array().unwrap().len(), 98);
    call(&["export"]);
    let mut metrics: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["speed_up"].as_f64().unwrap() > 0.0);
    strip_timing(&mut metrics);
    metrics
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = pipeline(a.path());
    let mb = pipeline(b.path());
    assert_eq!(ma, mb);
    for f in ["search-lth/genotype.json", "search-lth/trajectory.csv", "search-baseline/trajectory.csv"] {
        let x = std::fs::read(a.path().join("run").join(f)).unwrap();
        let y = std::fs::read(b.path().join("run").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between same-seed runs");
    }
}

#[test]
fn missing_artifact_yields_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = cellsearch(&["search", "--mode", "lth", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let rec: Value = serde_json::from_slice(&out.stderr).expect("error record");
    assert!(rec["error"]["kind"].is_string());
    assert!(rec["error"]["message"].is_string());
}

#[test]
fn usage_errors_exit_with_two() {
    let out = cellsearch(&["search", "--mode", "greedy"]);
    assert_eq!(out.status.code(), Some(2));
    let rec: Value = serde_json::from_slice(&out.stderr).expect("error record");
    assert_eq!(rec["error"]["kind"], "usage");
    assert!(cellsearch(&["--help"]).status.success());
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"schema_version":1,"seed":1,"search":{"warmup_epochs":300}}"#).unwrap();
    let out = cellsearch(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(&cfg, r#"{"schema_version":2,"seed":1}"#).unwrap();
    let out = cellsearch(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
