use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dbscheme::artifacts::{read_run_config, read_summary};
use dbscheme_core::train::FixedConfig;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbscheme")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = cli(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn fixture(kind: &str, size: &str, dir: &Path) {
    ok(&["--seed", "3", "--out", dir.to_str().unwrap(), "make-fixture", kind, "--size", size]);
}

#[test]
fn make_fixture_then_inspect_and_build_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("kin");
    fixture("kinship", "50", &ds);
    assert!(ds.join("manifest.json").is_file() && ds.join("rule.json").is_file());
    let schema = ok(&["inspect-schema", ds.to_str().unwrap()]);
    assert!(schema.contains("foreign key") && schema.contains("target pair.same_gen"), "{schema}");

    let edges = tmp.path().join("edges.json");
    let stats = ok(&["--strict-integrity", "--out", edges.to_str().unwrap(), "build-graph", ds.to_str().unwrap()]);
    let stats: serde_json::Value = serde_json::from_str(&stats).unwrap();
    let exported: serde_json::Value = serde_json::from_str(&fs::read_to_string(&edges).unwrap()).unwrap();
    let n_pairs: u64 = exported.as_array().unwrap().iter().map(|e| e["pairs"].as_array().unwrap().len() as u64).sum();
    assert!(n_pairs > 0);
    assert_eq!(stats["total_edges"].as_u64(), Some(n_pairs), "{stats}");
}

#[test]
fn train_with_fixed_config_then_export() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("flat");
    fixture("flat_table", "40", &ds);
    let run = tmp.path().join("run");
    let table = ok(&["--out", run.to_str().unwrap(), "train", ds.to_str().unwrap(), "--model", "tabular-fnn", "--config", "small", "--steps", "30"]);
    let rc = read_run_config(&run).unwrap();
    let expected = FixedConfig::Small.config();
    assert_eq!((rc.trials[0].d_model, rc.trials[0].layers, rc.trials[0].heads, rc.trials[0].lr, rc.trials[0].steps), (expected.d_model, expected.layers, expected.heads, expected.lr, 30));
    assert_eq!(ok(&["export", run.to_str().unwrap()]), table);
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn search_runs_the_requested_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("star");
    fixture("star_regression", "30", &ds);
    let run = tmp.path().join("run");
    let table = ok(&["--out", run.to_str().unwrap(), "search", ds.to_str().unwrap(), "--model", "tabular-fnn", "--steps", "10"]);
    assert_eq!(table.lines().count(), 17);
    assert_eq!(read_summary(&run).unwrap().trials.len(), 16);
}

#[test]
fn bad_input_fails_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cli(&["inspect-schema", tmp.path().join("missing").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = cli(&["export", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let o = cli(&["make-fixture", "kinship", "--size", "3", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
}
