//! The `rtg` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn rtg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtg")).args(args).output().expect("binary runs")
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn error_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().find(|l| l.starts_with('{')).expect("json error record on stderr");
    serde_json::from_str::<Value>(line).expect("valid json")["error"].clone()
}

#[test]
fn empty_config_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.toml");
    std::fs::write(&path, "").unwrap();
    let out = rtg(&["validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_record(&out);
    assert_eq!(e["kind"], "parse");
    assert!(e["line"].as_u64().is_some());
}

#[test]
fn missing_reference_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenarios().join("fig9_compare.toml"))
        .unwrap()
        .replace("../crates/core/fixtures/reference/tabletop_reach.csv", "nowhere.csv");
    let path = dir.path().join("missing.toml");
    std::fs::write(&path, text).unwrap();
    let out = rtg(&["run", "--out", dir.path().to_str().unwrap(), path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_record(&out);
    assert_eq!(e["kind"], "file_not_found");
    assert!(e["message"].as_str().unwrap().contains("nowhere.csv"));
}

#[test]
fn shipped_scenarios_validate() {
    let mut paths: Vec<String> = std::fs::read_dir(scenarios())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .map(|p| p.display().to_string())
        .collect();
    paths.sort();
    let mut args = vec!["validate"];
    args.extend(paths.iter().map(String::as_str));
    let out = rtg(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), paths.len());
    for line in stdout.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["config_sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn unit_scenario_writes_its_reports() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenarios().join("rtg_unit.toml");
    let out = rtg(&["run", "--dump-qp", "--out", dir.path().to_str().unwrap(), path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["scenario"], "rtg_unit");
    let files = v["files"].as_array().unwrap();
    assert!(!files.is_empty());
    for f in files {
        assert!(Path::new(f.as_str().unwrap()).is_file(), "{f}");
    }
    assert!(dir.path().join("rtg_unit").is_dir());
}

#[test]
fn bench_accepts_minimal_chunks() {
    let out = rtg(&["bench", "--chunk-len", "2", "--channels", "3", "--repetitions", "100"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["bench"]["repetitions"], 100);
    assert!(v["bench"]["ingest_median"].as_f64().unwrap() > 0.0);
}

#[test]
fn bench_rejects_few_repetitions() {
    let out = rtg(&["bench", "--chunk-len", "32", "--channels", "20", "--repetitions", "99"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["kind"], "invalid");
}
