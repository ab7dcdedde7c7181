use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn drum(args: &[&str]) -> Output {
    drum_with_env(args, None)
}

fn drum_with_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_drum"));
    cmd.args(args).env_remove("DRUM_SEED");
    if let Some(s) = seed_env {
        cmd.env("DRUM_SEED", s);
    }
    cmd.output().expect("spawn drum")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "drum failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Four users with 24 history prompts and one target each: 100 records.
fn corpus(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("corpus");
    ok(drum(&[
        "gen-synthetic", "--out", s(&out), "--users", "4", "--history", "24",
        "--d-sim", "8", "--d-cond", "8", "--max-tokens", "3",
    ]));
    out
}

#[test]
fn inspect_reports_corpus_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let text = ok(drum(&["inspect", "--corpus", s(&c)]));
    for line in ["records: 100", "users: 4", "d_sim: 8", "d_cond: 8", "max_tokens: 3"] {
        assert!(text.lines().any(|l| l == line), "missing {line:?} in\n{text}");
    }
    assert!(c.join("run_manifest.json").exists());
}

#[test]
fn sample_defaults_to_a_tenth_of_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let profile = dir.path().join("profile.json");
    ok(drum(&["sample", "--corpus", s(&c), "--out", s(&profile)]));
    let v = read_json(&profile);
    let indices = v["indices"].as_array().unwrap();
    assert_eq!(indices.len(), 10);
    assert_eq!(v["ids"].as_array().unwrap().len(), 10);
    let manifest = read_json(&dir.path().join("profile.run_manifest.json"));
    assert_eq!(manifest["subcommand"], "sample");
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn seed_falls_back_to_the_environment_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let from_env = dir.path().join("env.json");
    let from_flag = dir.path().join("flag.json");
    let other = dir.path().join("other.json");
    ok(drum_with_env(&["sample", "--corpus", s(&c), "--k", "20", "--out", s(&from_env)], Some("42")));
    ok(drum(&["sample", "--corpus", s(&c), "--k", "20", "--seed", "42", "--out", s(&from_flag)]));
    ok(drum_with_env(&["sample", "--corpus", s(&c), "--k", "20", "--seed", "5", "--out", s(&other)], Some("42")));
    assert_eq!(read_json(&from_env), read_json(&from_flag));
    assert_eq!(read_json(&from_env)["config"]["seed"], 42);
    assert_eq!(read_json(&other)["config"]["seed"], 5);
}

#[test]
fn personalize_uses_default_alpha_and_writes_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let params = dir.path().join("params");
    let profile = dir.path().join("profile.json");
    let out = dir.path().join("personalized");
    ok(drum(&["train", "--corpus", s(&c), "--out", s(&params), "--steps", "5", "--layers", "1", "--heads", "2"]));
    assert!(params.join("train_report.json").exists());
    ok(drum(&["sample", "--corpus", s(&c), "--user", "u0000", "--ratio", "0.2", "--out", s(&profile)]));
    ok(drum(&[
        "personalize", "--params", s(&params), "--corpus", s(&c), "--profile", s(&profile),
        "--target-id", "u0000/t0000", "--out", s(&out),
    ]));
    let manifest = read_json(&out.join("run_manifest.json"));
    assert_eq!(manifest["config"]["alpha"], 0.3);
    assert_eq!(manifest["config"]["guidance"], true);
    let text = ok(drum(&["inspect", "--corpus", s(&out)]));
    assert!(text.contains("records: 1"), "{text}");
}

#[test]
fn usage_errors_exit_with_two() {
    let out = drum(&["inspect", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = drum(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = drum(&["--threads", "0", "inspect", "--corpus", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = drum(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn domain_errors_exit_with_one_and_name_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = drum(&["inspect", "--corpus", s(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[io]"));

    let c = corpus(dir.path());
    let out = drum(&["sample", "--corpus", s(&c), "--ratio", "1.5", "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[range]"));

    std::fs::write(c.join("manifest.json"), "{").unwrap();
    let out = drum(&["inspect", "--corpus", s(&c)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[format]"));
}
