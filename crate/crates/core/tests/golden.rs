mod common;

use std::path::PathBuf;
use std::process::Command;

use common::fixture_path;
use sca_core::report::{parse_json, render_text, run_sca, RunConfig};

fn sca(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sca")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sca-tests-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn stock_management_text_report_matches_golden() {
    let golden = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/stock_management.txt")).unwrap();
    let report = run_sca(&RunConfig::new(fixture_path("stock_management.sdm"))).unwrap();
    assert_eq!(render_text(&report), golden);
}

#[test]
fn cli_text_report_matches_library() {
    let path = fixture_path("stock_management.sdm");
    let out = sca(&["analyze", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let report = run_sca(&RunConfig::new(&path)).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), render_text(&report));
}

#[test]
fn cli_json_report_parses_back() {
    let path = fixture_path("smooth_loop.sdm");
    let out = sca(&["analyze", path.to_str().unwrap(), "--report", "json", "--dashed", "solid"]);
    assert_eq!(out.status.code(), Some(0));
    let report = parse_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(report.sca_schema, 1);
    assert_eq!(report.step5.verdicts.len(), 1);
    assert!(!report.step5.verdicts[0].structurally_controllable);
}

#[test]
fn cli_writes_dot_file() {
    let dot = scratch("stock_management.dot");
    let path = fixture_path("stock_management.sdm");
    let out = sca(&["analyze", path.to_str().unwrap(), "--dot", dot.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&dot).unwrap();
    assert!(text.starts_with("digraph G {"));
    assert!(text.contains("\"AdjS\" -> \"DAR\" [style=dashed]"), "{text}");
    assert!(text.contains("\"SL_star\" [shape=square,color=red]"), "{text}");
}

#[test]
fn cli_rejects_malformed_model() {
    let bad = scratch("bad.sdm");
    std::fs::write(&bad, "model Bad\nstock x = 1 { inflow: (u + }\n").unwrap();
    let out = sca(&["analyze", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("error"));
}

#[test]
fn cli_rejects_missing_file_and_bad_step() {
    assert_eq!(sca(&["analyze", "/nonexistent/model.sdm"]).status.code(), Some(1));
    let path = fixture_path("smooth_loop.sdm");
    assert_eq!(sca(&["analyze", path.to_str().unwrap(), "--dt", "0"]).status.code(), Some(1));
}
