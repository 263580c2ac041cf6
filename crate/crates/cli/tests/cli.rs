use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cohort-phenotyper"));
    c.env("COHORT_PHENOTYPER_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_preprocess_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&["synth", "--seed", "4", "--out", path(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("cohort.csv").exists() && data.join("schema.json").exists());

    let config = dir.path().join("config.json");
    let body = serde_json::json!({
        "input": { "cohort_csv": data.join("cohort.csv"), "schema_json": data.join("schema.json") }
    });
    std::fs::write(&config, body.to_string()).unwrap();
    let pre = dir.path().join("pre");
    let out = run(&[
        "preprocess", "--config", path(&config), "--seed", "4", "--out", path(&pre),
        "--impute-k", "3", "--outlier-alpha", "0.01", "--quadratic", "age,bmi",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let header = std::fs::read_to_string(pre.join("preprocessed.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.contains("age^2") && header.contains("bmi^2"), "{header}");
    assert!(pre.join("manifest.json").exists());
}

#[test]
fn fit_with_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "fit", "--seed", "3", "--out", path(dir.path()), "--model", "lr", "--visit", "2",
        "--features", r#"["age","bmi","ldl"]"#,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("wald_lr_visit2.csv").exists());
    assert!(!dir.path().join("wald_lr_visit1.csv").exists());
    assert!(!dir.path().join("lgmm_fit.json").exists());
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = path(dir.path());
    assert_eq!(code(&run(&["run", "--out", o, "--outlier-alpha", "2"])), 2);
    assert_eq!(code(&run(&["cluster", "--out", o, "--k", "lots"])), 2);
    assert_eq!(code(&run(&["cluster", "--out", o, "--k-range", "4..2"])), 2);
    assert_eq!(code(&run(&["fit", "--out", o, "--features", "age"])), 2);
    assert_eq!(code(&run(&["run", "--config", "/nonexistent/config.json", "--out", o])), 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(code(&run(&["run", "--config", path(&bad), "--out", o])), 2);
    assert_eq!(code(&run(&["synth", "--config", path(&bad), "--out", o])), 2);
    let out = bin().env("COHORT_PHENOTYPER_THREADS", "zero").args(["preprocess", "--out", o]).output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn stage_failure_exits_3_and_keeps_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"input": {"cohort_csv": "/nonexistent/c.csv", "schema_json": "/nonexistent/s.json"}}"#).unwrap();
    let out = run(&["run", "--config", path(&config), "--out", path(dir.path())]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("preprocess"));
    assert!(dir.path().join("manifest.json").exists());

    // an unknown feature passes validation but fails when the model is built
    let out = run(&["fit", "--out", path(dir.path()), "--features", r#"["not_a_feature"]"#]);
    assert_eq!(code(&out), 3);
}
