//! The `tsa` binary: exit codes and the non-run subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn tsa(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsa"))
        .arg("--fixtures")
        .arg(fixtures())
        .arg("--replay")
        .arg(fixtures().join("golden/cassette.jsonl"))
        .arg("--assessments")
        .arg(root)
        .args(args)
        .env_remove("TSA_CONFIG")
        .env_remove("TSA_ABORT_AFTER_SECTION")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn golden(root: &Path) {
    let out = tsa(root, &["run", "--target", "TP53", "--id", "g"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("completed g"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(tsa(tmp.path(), &["run"]).status.code(), Some(2));
    assert_eq!(tsa(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    let out = tsa(tmp.path(), &["resume", "missing"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).starts_with("error: "));
}

#[test]
fn bad_configuration_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tsa.toml");
    std::fs::write(&cfg, "this is = not [toml").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tsa"))
        .args(["--config"])
        .arg(&cfg)
        .args(["run", "--target", "TP53"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", text(&out.stderr));
}

#[test]
fn evaluate_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    golden(tmp.path());
    let out = tsa(tmp.path(), &["evaluate", "g", "--json"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["target"], "TP53");
    assert!(v["d4"]["traceability"].as_f64().unwrap() > 0.9);
    let out = tsa(tmp.path(), &["evaluate", "g"]);
    assert!(text(&out.stdout).contains("D1"));

    let out = tsa(tmp.path(), &["export", "g", "--format", "json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["sections"].as_array().unwrap().len(), 8);
    assert_eq!(tsa(tmp.path(), &["export", "g", "--format", "docx"]).status.code(), Some(2));

    let out = tsa(tmp.path(), &["resume", "g"]);
    assert!(out.status.success());
    assert!(text(&out.stdout).contains("already completed g"));
}

#[test]
fn edit_from_stdin_and_reinvoke() {
    let tmp = tempfile::tempdir().unwrap();
    golden(tmp.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_tsa"))
        .arg("--fixtures")
        .arg(fixtures())
        .arg("--assessments")
        .arg(tmp.path())
        .args(["edit", "g", "clinical", "--body", "-", "--actor", "alice"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"### Clinical trials\n\nNo clinical data yet.\n\n### Adverse events\n\nNone reported.\n\n### Human genetic disease\n\nNone reported.\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report = std::fs::read_to_string(tmp.path().join("g/report.md")).unwrap();
    assert!(report.contains("No clinical data yet."));

    let bad = tmp.path().join("bad.md");
    std::fs::write(&bad, "Rash in 12% of patients [ev:999].\n").unwrap();
    let out = tsa(tmp.path(), &["edit", "g", "clinical", "--body", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("hallucinated-citation"), "{}", text(&out.stderr));

    let instruction = "Please expand knockout phenotype coverage with the allele used.";
    let out = tsa(tmp.path(), &["reinvoke", "g", "genetic", "--instruction", instruction]);
    assert!(out.status.success(), "{}", text(&out.stderr));
}

#[test]
fn stdio_fixture_server_answers_a_handshake() {
    let corpus = fixtures().join("servers/uniprot_entry.json");
    let mut child = Command::new(env!("CARGO_BIN_EXE_tsa"))
        .args(["fixture-server", "--corpus"])
        .arg(&corpus)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        writeln!(stdin, r#"{{"jsonrpc":"2.0","id":1,"method":"initialize","params":{{}}}}"#).unwrap();
        writeln!(stdin, "not json").unwrap();
        writeln!(stdin, r#"{{"jsonrpc":"2.0","id":2,"method":"tools/list","params":{{}}}}"#).unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<Value> = text(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["id"], 1);
    assert!(lines[1]["error"]["code"].is_i64());
    assert_eq!(lines[2]["result"]["tools"][0]["name"], "uniprot_entry");
}
