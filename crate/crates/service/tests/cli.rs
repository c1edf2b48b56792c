//! End-to-end runs of the `loopguard` binary against the repository fixtures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn loopguard(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_loopguard"))
        .args(args)
        .current_dir(repo_root())
        .env_remove("LOOPGUARD_DATA_DIR")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn run_asks_the_operator_and_reprompts() {
    let out = loopguard(
        &["run", "--task", "open_drawer", "--sim", "--simulated", "--delta", "0", "--seed", "1"],
        "maybe\nsuccess\n",
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let err = stderr(&out);
    assert_eq!(err.matches("I am not sure! The current subtask is successful or failed? ").count(), 2);
    let trace: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(trace["final_status"], "success");
    assert_eq!(trace["human_queries"], 1);
    assert_eq!(trace["steps"][0]["verdict"]["source"], "human");
}

#[test]
fn run_exits_nonzero_when_retries_run_out() {
    let out = loopguard(
        &["run", "--task", "open_drawer", "--sim", "--simulated", "--delta", "0", "--retries", "2"],
        "failure\nfailure\nfailure\n",
    );
    assert_eq!(out.status.code(), Some(1));
    let trace: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(trace["final_status"], "aborted_retries_exhausted");
    assert_eq!(trace["retries"], 2);
}

#[test]
fn run_trusts_a_confident_model() {
    let out = loopguard(
        &["run", "--task", "sponge_in_drawer", "--sim", "--simulated", "--delta", "1", "--seed", "4"],
        "",
    );
    let trace: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(trace["human_queries"], 0);
    assert!(!stderr(&out).contains("I am not sure!"));
}

#[test]
fn configuration_errors_exit_2() {
    let out = loopguard(&["--json", "run", "--task", "open_drawer"], "");
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "config");

    let out = loopguard(&["run", "--task", "no_such_task", "--sim"], "");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: "));

    let out = loopguard(&["sweep", "--delta", "0:2:0.5"], "");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_reproduces_the_golden_report() {
    let out = loopguard(&["eval", "--dataset", "fixtures/synthetic.jsonl"], "");
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let golden = std::fs::read_to_string(repo_root().join("fixtures/golden/synthetic_report.txt")).unwrap();
    assert_eq!(stdout(&out), golden);
}

#[test]
fn eval_subset_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("report");
    let out = loopguard(
        &[
            "eval",
            "--dataset",
            "fixtures/synthetic.jsonl",
            "--strategy",
            "ssc",
            "--method",
            "entropy",
            "--breakpoints",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        "",
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = stdout(&out);
    assert!(table.contains("SSC"), "{table}");
    assert!(!table.contains("SRA"), "{table}");
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);
    assert!(out_dir.join("report.txt").is_file());
}

#[test]
fn sweep_is_reproducible() {
    let args = ["sweep", "--delta", "0:1:0.1", "--episodes", "200", "--seed", "7"];
    let a = loopguard(&args, "");
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let table = stdout(&a);
    assert_eq!(table.lines().filter(|l| !l.trim().is_empty()).count(), 12, "{table}");
    assert_eq!(table, stdout(&loopguard(&args, "")));
}

#[test]
fn validate_accepts_fixtures_and_rejects_broken_tasks() {
    let out = loopguard(&["validate", "--dataset", "fixtures/synthetic.jsonl"], "");
    assert_eq!(out.status.code(), Some(0), "{}{}", stdout(&out), stderr(&out));

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("broken.json"),
        r#"{"id": "broken", "instruction": "x", "subtasks": []}"#,
    )
    .unwrap();
    let out = loopguard(&["validate", "--task-dir", dir.path().to_str().unwrap()], "");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("broken"), "{}", stderr(&out));
}
