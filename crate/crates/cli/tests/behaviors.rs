//! Process-level contracts of the binary: exit codes, stderr wording, and
//! output files.

use std::path::PathBuf;
use std::process::{Command, Output};

fn fixtures_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn dsaudit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsaudit"))
        .args(args)
        .output()
        .unwrap()
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("process exited")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&dsaudit(&["--help"])), 0);
    assert_eq!(code(&dsaudit(&["--version"])), 0);
    assert_eq!(code(&dsaudit(&["analyze", "--help"])), 0);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&dsaudit(&["analyze", "--bogus"])), 1);
}

#[test]
fn external_analyst_without_endpoint_is_a_usage_error() {
    let fixtures = fixtures_root();
    let output = dsaudit(&[
        "analyze",
        "--package",
        "com.facebook.katana",
        "--analyst",
        "external",
        "--fixtures",
        fixtures.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 1);
    assert!(
        String::from_utf8_lossy(&output.stderr).contains("--endpoint"),
        "usage error names the missing flag"
    );
}

#[test]
fn missing_runtime_fixture_is_a_data_error() {
    let fixtures = fixtures_root();
    let output = dsaudit(&[
        "analyze",
        "--package",
        "com.absent.app",
        "--fixtures",
        fixtures.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 2);
}

#[test]
fn empty_corpus_is_a_data_error_with_a_clear_message() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("empty.json");
    std::fs::write(&corpus, "[]").unwrap();
    let fixtures = fixtures_root();
    let output = dsaudit(&[
        "stats",
        "--corpus",
        corpus.to_str().unwrap(),
        "--fixtures",
        fixtures.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 2);
    assert!(
        String::from_utf8_lossy(&output.stderr).contains("no apps to analyze"),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn invalid_kb_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let kb = dir.path().join("kb.json");
    std::fs::write(&kb, "{ not json").unwrap();
    let output = dsaudit(&["validate-kb", "--kb", kb.to_str().unwrap()]);
    assert_eq!(code(&output), 2);
}

#[test]
fn stats_table_prints_counts_and_two_decimal_percentages() {
    let fixtures = fixtures_root();
    let corpus = fixtures.join("corpus/bundled.json");
    let output = dsaudit(&[
        "stats",
        "--corpus",
        corpus.to_str().unwrap(),
        "--fixtures",
        fixtures.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("verdict"), "table header present");
    assert!(stdout.contains("20.00%"), "half-up two-decimal percentages");
    assert!(stdout.contains("total"), "raw counts row present");
}

#[test]
fn simulate_writes_one_jsonl_line_per_install() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("warnings.jsonl");
    let fixtures = fixtures_root();
    let scenario = fixtures.join("scenarios/three-installs.json");
    let output = dsaudit(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--fixtures",
        fixtures.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&output),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let written = std::fs::read_to_string(&out).unwrap();
    assert!(written.ends_with('\n'), "output file ends with a newline");
    let lines: Vec<&str> = written.trim_end().lines().collect();
    assert_eq!(lines.len(), 3);
    for line in lines {
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(value["report"]["sentences"].is_array());
    }
}
