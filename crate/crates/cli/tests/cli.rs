// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ehrfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehrfl")).args(args).output().expect("spawn ehrfl")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"{
  "clients": [
    {"spec": {"client_id": "host", "n_patients": 40}},
    {"spec": {"client_id": "twin", "n_patients": 40}},
    {"spec": {"client_id": "far", "n_patients": 40, "shift": 0.8, "shift_seed": 2}}
  ],
  "seeds": [0, 1],
  "k_values": [2, 3],
  "model": {"vocab_size": 300, "dim": 8, "max_len": 8},
  "training": {"max_rounds": 2, "patience": 2}
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const WORKED_LEDGER: &str = r#"{"n": 5, "k": 3, "r": 300, "l": 1, "e": 300, "x": 10000.0,
  "c_train": 2.0, "c_model": 0.1, "c_extract": 0.1, "c_average": 0.1, "c_embedding": 0.1, "c_sim": 0.1}"#;

#[test]
fn cost_reports_the_worked_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("ledger.json");
    fs::write(&ledger, WORKED_LEDGER).unwrap();
    let report = dir.path().join("report.json");
    let out = ehrfl(&["cost", "--ledger", ledger.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["total_net_savings"], 20717.5);
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(saved, v);
}

#[test]
fn bad_inputs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("ledger.json");
    fs::write(&ledger, WORKED_LEDGER.replace("\"k\": 3", "\"k\": 6")).unwrap();
    assert_eq!(code(&ehrfl(&["cost", "--ledger", ledger.to_str().unwrap()])), 2);
    assert_eq!(code(&ehrfl(&["cost", "--ledger", "/nonexistent/ledger.json"])), 2);

    let broken = write_config(dir.path(), "{ not json");
    assert_eq!(code(&ehrfl(&["generate", "--config", &broken, "--out", dir.path().to_str().unwrap()])), 2);
    let no_host = write_config(dir.path(), r#"{"host": "nobody"}"#);
    assert_eq!(code(&ehrfl(&["generate", "--config", &no_host, "--out", dir.path().to_str().unwrap()])), 2);
    assert_eq!(code(&ehrfl(&["linearize", "--in", "a.jsonl", "--dict", "a.dict.json"])), 2);
    // Usage errors from the argument parser share the code.
    assert_eq!(code(&ehrfl(&["sweep", "--algo", "FedSgd"])), 2);
}

#[test]
fn sweep_without_data_is_a_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = ehrfl(&["sweep", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ehrfl generate"));
}

#[test]
fn generate_is_deterministic_and_linearize_reads_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ehrfl(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for id in ["host", "twin", "far"] {
        for ext in ["jsonl", "dict.json", "schema.json", "meta.json"] {
            let name = format!("{id}.{ext}");
            assert_eq!(fs::read(a.join("data").join(&name)).unwrap(), fs::read(b.join("data").join(&name)).unwrap(), "{name}");
        }
    }
    let reseeded = dir.path().join("c");
    assert_eq!(code(&ehrfl(&["generate", "--config", &cfg, "--seed", "5", "--out", reseeded.to_str().unwrap()])), 0);
    assert_ne!(fs::read(a.join("data/host.jsonl")).unwrap(), fs::read(reseeded.join("data/host.jsonl")).unwrap());

    let text = dir.path().join("host.txt");
    let o = ehrfl(&[
        "linearize",
        "--in",
        a.join("data/host.jsonl").to_str().unwrap(),
        "--dict",
        a.join("data/host.dict.json").to_str().unwrap(),
        "--out",
        text.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let body = fs::read_to_string(&text).unwrap();
    assert_eq!(body.split("\n\n").filter(|p| !p.trim().is_empty()).count(), 40);
    assert!(body.lines().filter(|l| !l.is_empty()).all(|l| l.split(' ').count() >= 3));
}

#[test]
fn end_to_end_small_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let ok = |args: &[&str]| {
        let o = ehrfl(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    ok(&["generate", "--config", &cfg, "--out", out_s]);
    ok(&["sweep", "--config", &cfg, "--out", out_s, "--algo", "FedAvg,FedBN"]);
    // Reports reuse the stored sweep configuration.
    let table2 = ok(&["correlate", "--out", out_s]);
    assert!(table2.contains("seed mean"));
    let table3 = ok(&["select-eval", "--out", out_s]);
    assert!(table3.contains("twin"));
    for f in ["sweep.csv", "table1.csv", "table2.csv", "table3.csv", "selection.json", "sweep_config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let picked = ok(&["select", "--config", &cfg, "--out", out_s, "--metric", "kl", "--k", "2", "--seed", "1"]);
    let v: serde_json::Value = serde_json::from_str(&picked).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(code(&ehrfl(&["select", "--config", &cfg, "--out", out_s, "--k", "9"])), 2);

    // Same directory, different experiment.
    assert_eq!(code(&ehrfl(&["sweep", "--config", &cfg, "--out", out_s, "--rounds", "3"])), 2);
}
