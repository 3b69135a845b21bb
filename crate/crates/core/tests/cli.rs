use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivd-lookonce"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn synth_writes_splits_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--seed", "3", "synth", "--cases", "20", "--fp-count", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = |name: &str| std::fs::read_to_string(dir.path().join("out").join(name)).unwrap().lines().count();
    assert_eq!(lines("train.jsonl") + lines("val.jsonl") + lines("test.jsonl"), 20);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn runtime_error_is_one_line_and_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval", "--data", "missing", "--methods", "search-tree"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["synth", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_without_checkpoint_runs_baselines() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["synth", "--cases", "20", "--fp-count", "3"]).status.success());
    let out = run(dir.path(), &["eval", "--data", "out", "--methods", "search-tree,condition,ground-truth"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let rows: Vec<_> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    let gt = rows.iter().find(|r| r.starts_with("ground-truth")).unwrap();
    assert!(gt.contains(",1,") || gt.contains(",1.0"), "{gt}");
}
