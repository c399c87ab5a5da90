use std::fs;
use std::process::{Command, Output};

fn genreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genreg")).args(args).env_remove("GENREG_WORKERS").output().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("stderr is not one JSON line ({e}): {line}"))
}

#[test]
fn unknown_config_key_is_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train.gan_schedule]\ngenerator_evry = 3\n").unwrap();
    let out = genreg(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["key"], "train.gan_schedule.generator_evry");
}

#[test]
fn eval_without_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let out = genreg(&["eval", "--methods", "icp", "--data", &p("missing"), "--out", &p("o")]);
    let err = error_json(&out);
    assert!(err["error"]["message"].as_str().unwrap().contains("manifest"), "{err}");
}

#[test]
fn eval_on_empty_dataset_writes_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[data]\npairs = 0\nn_points = 32\n[network]\nn_points = 32\n").unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let c = cfg.to_str().unwrap();
    assert!(genreg(&["gen-data", "--config", c, "--out", &p("d")]).status.success());
    let out = genreg(&["eval", "--config", c, "--methods", "icp", "--data", &p("d"), "--out", &p("o")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("o/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "{csv}");
}

#[test]
fn generator_methods_need_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[data]\npairs = 1\nn_points = 32\n[network]\nn_points = 32\n").unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let c = cfg.to_str().unwrap();
    assert!(genreg(&["gen-data", "--config", c, "--out", &p("d")]).status.success());
    let out = genreg(&["eval", "--config", c, "--methods", "genreg", "--data", &p("d"), "--out", &p("o")]);
    error_json(&out);
}

#[test]
fn success_prints_one_json_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = genreg(&["bench-consensus", "--n", "64", "--m", "16", "--trials", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["command"], "bench-consensus");
    assert!(dir.path().join("bench.csv").exists() && dir.path().join("bench.json").exists());
}
