use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_canopy-forge"));
    c.args(["--log-level", "warn"]);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn synth(dir: &Path) -> String {
    let root = dir.join("fx");
    let out = run(&["synth", "--out", root.to_str().unwrap(), "--seed", "5"]);
    assert!(out.status.success());
    json(&out)["config"].as_str().unwrap().to_string()
}

#[test]
fn run_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());

    let dry = run(&["run", "--config", &config, "--dry-run"]);
    assert!(dry.status.success());
    let stages = json(&dry)["stages"].as_array().unwrap().clone();
    assert_eq!(stages.len(), 6);
    assert!(stages.iter().all(|s| s["run"] == true));

    let first = run(&["run", "--config", &config, "--workers", "2"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let summary = json(&first);
    assert_eq!(summary["samples"], 6);
    assert_eq!(summary["images"], 24);

    let again = json(&run(&["run", "--config", &config]));
    assert!(again["stages"].as_array().unwrap().iter().all(|s| s["skipped"] == true));

    // Use targets as predictions: zero error everywhere.
    let manifest = summary["manifest"].as_str().unwrap();
    let samples = Path::new(manifest).parent().unwrap();
    let preds = dir.path().join("preds");
    fs::create_dir_all(&preds).unwrap();
    for line in fs::read_to_string(manifest).unwrap().lines() {
        let e: Value = serde_json::from_str(line).unwrap();
        let id = e["tile_id"].as_str().unwrap();
        fs::copy(samples.join(e["chm_path"].as_str().unwrap()), preds.join(format!("{id}_pred.tif"))).unwrap();
    }
    let report = dir.path().join("report.json");
    let png = dir.path().join("png");
    let out = run(&[
        "evaluate",
        "--pred-dir",
        preds.to_str().unwrap(),
        "--manifest",
        manifest,
        "--k",
        "10",
        "--theta",
        "0.5",
        "--report",
        report.to_str().unwrap(),
        "--png-dir",
        png.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["tiles"].as_array().unwrap().len(), 6);
    assert_eq!(r["aggregate"]["wmse"], 0.0);
    assert_eq!(fs::read_dir(&png).unwrap().count(), 6);

    // Reports are deterministic.
    let report2 = dir.path().join("report2.json");
    run(&["evaluate", "--pred-dir", preds.to_str().unwrap(), "--manifest", manifest, "--report", report2.to_str().unwrap()]);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&report2).unwrap());
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let work = dir.path().join("elsewhere");
    let out = run(&["tile", "--config", &config, "--tile-px", "64", "--work-dir", work.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["tiling"]["candidates"], 32);
    assert!(work.join("samples/manifest.jsonl").is_file());

    let v = json(&run(&["validate", "--config", &config, "--seed", "9", "--set", "fetch.retries=1"]));
    assert_eq!(v["seed"], 9);
    assert_eq!(v["fetch"]["retries"], 1);
}

#[test]
fn config_errors_exit_nonzero_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let out = run(&["run", "--config", &config, "--cell=-1"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cell_size"), "{stderr}");
    assert!(stderr.lines().any(|l| l.starts_with('{') && l.contains("\"kind\":\"ConfigError\"")), "{stderr}");
}

#[test]
fn standalone_index_fetch_and_chm() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let catalog = dir.path().join("fx/catalog.jsonl");
    let out = run(&["index", "--catalog", catalog.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 25);

    let dest = dir.path().join("raw");
    let out = run(&["fetch", "--catalog", catalog.to_str().unwrap(), "--dest", dest.to_str().unwrap(), "--parallel", "2", "--retries", "0"]);
    assert!(out.status.success());
    assert_eq!(json(&out)["fetched"].as_array().unwrap().len(), 25);

    let laz = dir.path().join("fx/lidar/lidar_a_0_1.laz");
    let chm_out = dir.path().join("single");
    let out = run(&["chm", "--input", laz.to_str().unwrap(), "--cell", "0.5", "--window", "10", "--out", chm_out.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["width"], 128);
    for name in ["dtm", "dsm", "chm"] {
        assert!(chm_out.join(format!("lidar_a_0_1_{name}.tif")).is_file());
    }
}

#[test]
fn tile_failures_give_distinct_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    fs::write(dir.path().join("fx/lidar/lidar_a_0_0.laz"), b"garbage").unwrap();
    let out = run(&["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(3));
    let summary = json(&out);
    let failures = summary["failures"].as_array().unwrap();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0]["stage"], "chm");
    assert_eq!(failures[0]["kind"], "MalformedFile");
}
