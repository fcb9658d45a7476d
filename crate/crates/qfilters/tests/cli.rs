use std::path::Path;
use std::process::{Command, Output};

use qfilters::format;
use qfilters::harness;
use qfilters_core::Error as CoreError;
use serde_json::Value;

fn qfilters(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfilters")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn validate_planted_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("validate.json");
    let o = qfilters(&["validate", "--planted", "--seed", "7", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out);
    assert_eq!(report["command"], "validate");
    assert_eq!(report["results"]["passed"], true);
    let checks = report["results"]["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["passed"] == true));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(qfilters(&["generate", "--policy", "qfilters"]).status.code(), Some(2));
    assert_eq!(qfilters(&["validate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(qfilters(&["generate", "--policy", "lru"]).status.code(), Some(2));
    assert_eq!(qfilters(&["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_csv_has_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = qfilters(&["sweep", "--samples", "100,300", "--seeds", "2", "--format", "csv", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(&out).unwrap();
    assert!(r.headers().unwrap().iter().any(|h| h == "samples"));
    let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
}

#[test]
fn calibration_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "calibrate".to_string(),
            "--docs".into(),
            "2".into(),
            "--doc-len".into(),
            "128".into(),
            "--samples".into(),
            "200".into(),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let (a, b) = (dir.path().join("a.qflt"), dir.path().join("b.qflt"));
    for p in [&a, &b] {
        let o = Command::new(env!("CARGO_BIN_EXE_qfilters")).args(args(p)).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn filters_from_another_model_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let filters = dir.path().join("f.qflt");
    let small = dir.path().join("small.tdm");
    let o = qfilters(&[
        "calibrate", "--docs", "2", "--doc-len", "128", "--samples", "200", "--out", path(&filters),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let o = qfilters(&[
        "init-model", "--d-model", "32", "--heads", "4", "--kv-heads", "2", "--d-head", "8", "--out", path(&small),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let set = format::load_filters(&filters).unwrap();
    let model = format::load_model(&small).unwrap();
    let err = set
        .check_compatible(&model.model.config().layout(), Some(&model.fingerprint))
        .unwrap_err();
    assert!(matches!(err, CoreError::FilterModelMismatch(_)), "{err:?}");

    let o = qfilters(&[
        "generate", "--policy", "qfilters", "--model", path(&small), "--filters", path(&filters), "--seq-len", "16",
        "--budget", "4",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn reports_match_apart_from_timings() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = qfilters(&[
            "generate", "--policy", "knorm", "--budget", "8", "--seq-len", "32", "--seed", "5", "--out", path(&out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let mut v = read_json(&out);
        v.as_object_mut().unwrap().remove("timings");
        v
    };
    let (a, b) = (run("a.json"), run("b.json"));
    assert_eq!(a, b);
    assert_eq!(a["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(a["results"][0]["peak_cache_len"], 8);
}

#[test]
fn default_model_round_trips_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tdm");
    let o = qfilters(&["init-model", "--seed", "9", "--out", path(&p)]);
    assert_eq!(o.status.code(), Some(0));
    let printed = String::from_utf8(o.stdout).unwrap();
    let loaded = format::load_model(&p).unwrap();
    assert_eq!(printed.trim(), format::hex(&loaded.fingerprint));
    let direct = harness::synthetic_model(&harness::default_model_config(), 9).unwrap();
    assert_eq!(direct.fingerprint, loaded.fingerprint);
}
