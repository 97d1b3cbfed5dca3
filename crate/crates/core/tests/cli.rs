use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kinetic::harness::REPORT_SCHEMA;
use serde_json::Value;

const CONSERVATION: &str = r#"{
  "schema_version": 1,
  "experiment": "conservation",
  "space": { "cells": 4 },
  "velocity": { "n_per_dim": 8, "v_max": 6.0 },
  "solver": { "t_final": 0.1, "bc": "specular" }
}"#;

fn kinetic(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinetic"))
        .args(args)
        .current_dir(dir)
        .env("KINETIC_OUTPUT_DIR", dir.join("results"))
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn schema_errors(instance: &Value) -> Vec<String> {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    validator.iter_errors(instance).map(|e| e.to_string()).collect()
}

#[test]
fn run_writes_a_schema_valid_report_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", CONSERVATION);
    let out = kinetic(tmp.path(), &["run", "c.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS mass_drift_per_time"), "{stdout}");
    let dir = tmp.path().join("results");
    let r = report(&dir);
    assert_eq!(schema_errors(&r), Vec::<String>::new());
    assert_eq!(r["schema_version"], 1);
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["bound"].is_number()));
    let csv = std::fs::read_to_string(dir.join("moments.csv")).unwrap();
    assert!(csv.starts_with("t,mass,energy\n"));
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn identical_runs_give_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let text = CONSERVATION.replacen('{', &format!("{{\n  \"output_dir\": \"{name}\","), 1);
        write(tmp.path(), &format!("{name}.json"), &text);
        assert_eq!(kinetic(tmp.path(), &["run", &format!("{name}.json")]).status.code(), Some(0));
    }
    let strip = |mut v: Value| {
        v["environment"]["wall_clock_seconds"] = Value::Null;
        v["config"]["output_dir"] = Value::Null;
        v
    };
    assert_eq!(strip(report(&tmp.path().join("a"))), strip(report(&tmp.path().join("b"))));
}

#[test]
fn failed_checks_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let text = CONSERVATION.replacen('{', "{\n  \"tolerances\": { \"energy_drift\": 1e-300 },", 1);
    write(tmp.path(), "c.json", &text);
    let out = kinetic(tmp.path(), &["run", "c.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("energy_drift"));
    let r = report(&tmp.path().join("results"));
    assert!(r["checks"].as_array().unwrap().iter().any(|c| c["pass"] == false));
}

#[test]
fn configuration_errors_exit_with_two_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    for (text, key) in [
        (CONSERVATION.replace("\"t_final\"", "\"t_finall\""), "solver.t_finall"),
        (CONSERVATION.replace("\"n_per_dim\": 8", "\"n_per_dim\": 1"), "velocity.n_per_dim"),
        (CONSERVATION.replace("\"schema_version\": 1", "\"schema_version\": 7"), "schema_version"),
        ("{ not json".to_string(), "<document>"),
    ] {
        write(tmp.path(), "bad.json", &text);
        for cmd in ["validate", "run"] {
            let out = kinetic(tmp.path(), &[cmd, "bad.json"]);
            assert_eq!(out.status.code(), Some(2), "{cmd} {key}");
            let err = String::from_utf8_lossy(&out.stderr);
            assert!(err.contains(key), "{cmd}: {err}");
        }
    }
    assert_eq!(kinetic(tmp.path(), &["validate", "missing.json"]).status.code(), Some(2));
}

#[test]
fn validate_accepts_the_shipped_configurations() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let out = kinetic(&root, &["validate", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
        n += 1;
    }
    assert_eq!(n, 8);
}

#[test]
fn sweep_runs_one_experiment_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", CONSERVATION);
    let out = kinetic(tmp.path(), &["sweep", "c.json", "--param", "solver.bc", "--values", "specular,diffusive"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for value in ["specular", "diffusive"] {
        let r = report(&tmp.path().join("results").join(format!("solver.bc={value}")));
        assert_eq!(r["config"]["solver"]["bc"], value);
    }
    let bad = kinetic(tmp.path(), &["sweep", "c.json", "--param", "solver.nope", "--values", "1"]);
    assert_eq!(bad.status.code(), Some(2));
}
