mod common;

use common::{lifecycle, run};

#[test]
fn scripted_lifecycle_exits_zero_throughout() {
    let dir = tempfile::tempdir().unwrap();
    let l = lifecycle(dir.path()).unwrap();
    assert!(l.failures().is_empty(), "{:#?}", l.failures());
    assert!(l.elapsed.as_secs() < 60, "{:?}", l.elapsed);
    assert_eq!(l.tampered_receipt.code, 1);
    assert_eq!(l.tampered_receipt.output["error"], "invalid_receipt", "{}", l.tampered_receipt.output);
}

#[test]
fn usage_errors_exit_two() {
    let out = std::process::Command::new(common::BIN).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_configs_report_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"version":1,"start":{"initial_members":[],"node_address":"x","rpc_address":"y","ledger_path":"l"},"join":{"target_rpc_address":"a:1","node_address":"a:2","rpc_address":"a:3","ledger_path":"l"},"enclave":{"platform_id":"p","platform_path":"p","code_blob_path":"c"}}"#).unwrap();
    let s = run(&["node", "start", "--config", p.to_str().unwrap()]);
    assert_eq!(s.code, 1);
    assert_eq!(s.output["error"], "config");
    std::fs::write(&p, r#"{"version":1,"start":{"initial_members":[{"id":"m","public_key":"zz"}]}}"#).unwrap();
    let s = run(&["node", "start", "--config", p.to_str().unwrap()]);
    assert!(s.output["message"].as_str().unwrap().contains("start.initial_members[0].public_key"), "{}", s.output);
}

#[test]
fn missing_ledger_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let key = dir.path().join("k");
    assert_eq!(run(&["keygen", "--out", key.to_str().unwrap()]).code, 0);
    let s = run(&["audit", "verify-chain", "/nonexistent/ledger.bin", "--service-key", &format!("{}.pub", key.display())]);
    assert_eq!(s.code, 1);
    assert_eq!(s.output["error"], "io");
}
