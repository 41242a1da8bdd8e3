//! End-to-end runs of the `capo` binary.

use std::path::Path;
use std::process::{Command, Output};

fn capo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capo"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CAPO_OUTPUT_ROOT")
        .output()
        .expect("spawn capo")
}

const SMALL: &[&str] = &[
    "-s",
    "env.vocab_size=4",
    "-s",
    "env.horizon=2",
    "-s",
    "env.prompt_length=2",
    "-s",
    "run.iterations=6",
    "-s",
    "run.checkpoint_every=3",
];

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn train_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "-o", "runs", "--seeds", "0,1"];
    args.extend_from_slice(SMALL);
    let out = capo(&args, dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for seed in ["seed-0", "seed-1"] {
        let run = dir.path().join("runs").join(seed);
        assert_eq!(lines(&run.join("metrics.jsonl")), 7);
        assert_eq!(lines(&run.join("timings.jsonl")), 7);
        assert!(run.join("checkpoint.json").exists());
        assert!(run.join("resolved.config").exists());
    }

    let out = capo(&["export", "-r", "runs/seed-0", "-o", "m.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(csv.starts_with("iteration,completions,reward,m_H,m_F,rejection_rate"));
    assert_eq!(csv.lines().count(), 8);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_capo"))
        .args(&args)
        .current_dir(dir.path())
        .env("CAPO_OUTPUT_ROOT", dir.path().join("elsewhere"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("elsewhere/seed-0/metrics.jsonl").exists());
}

#[test]
fn resume_refuses_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut short = vec!["train", "-o", "part"];
    short.extend_from_slice(SMALL);
    short.extend_from_slice(&["-s", "run.iterations=3"]);
    assert_eq!(capo(&short, dir.path()).status.code(), Some(0));
    // More iterations make a different config; resuming needs the original one.
    let mut resume = vec!["train", "-o", "part", "--resume"];
    resume.extend_from_slice(SMALL);
    let out = capo(&resume, dir.path());
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );

    let mut same = vec!["train", "-o", "part", "--resume"];
    same.extend_from_slice(SMALL);
    same.extend_from_slice(&["-s", "run.iterations=3"]);
    assert_eq!(capo(&same, dir.path()).status.code(), Some(0));
    assert_eq!(lines(&dir.path().join("part/seed-0/metrics.jsonl")), 4);
}

#[test]
fn sweep_writes_summaries() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("grid.toml"),
        r#"
seeds = [0]
set = ["env.vocab_size=4", "env.horizon=2", "env.prompt_length=2", "run.iterations=4"]
[axes]
"capo.enabled" = [false, true]
"#,
    )
    .unwrap();
    let out = capo(&["sweep", "-g", "grid.toml", "-o", "sw"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(lines(&dir.path().join("sw/summary.csv")), 3);
    assert_eq!(lines(&dir.path().join("sw/results.csv")), 3);
    assert!(dir.path().join("sw/cell-1/seed-0/metrics.jsonl").exists());
}

#[test]
fn verify_suite_passes_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = capo(
        &["verify", "--suite", "theorem", "--json", "v.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("v.jsonl")).unwrap();
    assert!(text.lines().all(|l| l.contains("\"passed\":true")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        capo(&["train", "-s", "run.group_size=1"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        capo(&["train", "-s", "capo.nonsense=1"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        capo(&["train", "-c", "missing.toml"], dir.path())
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        capo(&["export", "-r", "nowhere", "-o", "x.csv"], dir.path())
            .status
            .code(),
        Some(3)
    );
    let out = capo(&["train", "-s", "policy.top_k=99"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("policy.top_k"));
}
