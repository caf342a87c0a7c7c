//! End-to-end checks of the `dmmsim` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn dmmsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmmsim")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn unknown_subcommand_fails() {
    assert!(!dmmsim(&["frobnicate"]).status.success());
}

#[test]
fn missing_trace_reports_error() {
    let out = dmmsim(&["stats", "/nonexistent/trace.mem"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn unknown_preset_fails() {
    let mem = fixture("small.mem");
    let out = dmmsim(&["sim", mem.to_str().unwrap(), "--dmm", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stats_on_hand_written_trace() {
    let mem = fixture("small.mem");
    let json: serde_json::Value =
        serde_json::from_str(&stdout(&dmmsim(&["stats", mem.to_str().unwrap(), "--format", "json"]))).unwrap();
    assert_eq!(json["objects"], 6);
    assert_eq!(json["totalBytes"], 3266);
    assert_eq!(json["invalidFrees"], 1);
}

#[test]
fn sim_emits_metrics_json() {
    let mem = fixture("small.mem");
    let json: serde_json::Value =
        serde_json::from_str(&stdout(&dmmsim(&["sim", mem.to_str().unwrap(), "--dmm", "lea", "--format", "json"]))).unwrap();
    assert_eq!(json["metrics"]["mallocCount"], 6);
    assert!(json["metrics"]["hwmBytes"].as_u64().unwrap() > 0);
}

#[test]
fn compare_lists_every_preset() {
    let mem = fixture("small.mem");
    let csv = stdout(&dmmsim(&["compare", mem.to_str().unwrap(), "--format", "csv"]));
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("name,time,accesses"));
    let names: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["kng", "lea", "fib", "s10", "exa"]);
}

#[test]
fn map_renders_a_config_file() {
    let path = fixture("cfrac_custom.json");
    let text = stdout(&dmmsim(&["map", path.to_str().unwrap()]));
    assert!(text.contains("BuddySystemBinary"));
    assert!(text.contains("SimpleSegregatedStorage"));
}

#[test]
fn gen_writes_a_parseable_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.mem");
    let spec = fixture("cfrac_like.json");
    stdout(&dmmsim(&["gen", spec.to_str().unwrap(), "-o", out.to_str().unwrap()]));
    let json: serde_json::Value =
        serde_json::from_str(&stdout(&dmmsim(&["stats", out.to_str().unwrap(), "--format", "json"]))).unwrap();
    assert_eq!(json["objects"], 10_000);
}
