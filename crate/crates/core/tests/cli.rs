use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eventchain"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("stderr is JSON")
}

#[test]
fn gen_is_deterministic_and_writes_run_json() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = bin(&["gen", "--n", "6", "--seed", "11", "--k", "4", "--out", &format!("{name}/c.jsonl")], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("a/c.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/c.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 6);
    let run: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["world"]["events"], 4);
    assert_eq!(run["seeds"]["corpus_train"], 11);
}

#[test]
fn gradcheck_seed_0_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["gradcheck", "--seed", "0", "--out", "g"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("g/gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20 * 8);
    assert!(!csv.contains("false"));
}

#[test]
fn width_mismatch_is_a_config_error_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let small = r#"{"corpus":{"train":4,"test":2},"train":{"epochs":1}}"#;
    std::fs::write(dir.path().join("small.json"), small).unwrap();
    let out = bin(&["train", "--config", "small.json", "--out", "t"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.json", "metrics.csv", "prototypes.json", "run.json"] {
        assert!(dir.path().join("t").join(f).exists(), "{f}");
    }
    std::fs::write(dir.path().join("bad.json"), r#"{"world":{"feature_width":8}}"#).unwrap();
    let out = bin(&["eval", "--checkpoint", "t/checkpoint.json", "--config", "bad.json", "--out", "e"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert_eq!(err["code"], 2);
    assert!(!dir.path().join("e/eval.csv").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["train", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "usage");
    let out = bin(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn unreadable_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["gen", "--config", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
