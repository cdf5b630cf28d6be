//! Drives the `conledger` binary through a full service lifecycle.

#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

pub const BIN: &str = env!("CARGO_BIN_EXE_conledger");

pub struct Step {
    pub name: String,
    pub code: i32,
    pub output: Value,
}

/// Node processes, killed on drop.
#[derive(Default)]
pub struct Nodes(pub Vec<Child>);

impl Drop for Nodes {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

pub fn run(args: &[&str]) -> Step {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout);
    let output = text.lines().last().and_then(|l| serde_json::from_str(l).ok()).unwrap_or(Value::Null);
    Step { name: args[..2.min(args.len())].join(" "), code: out.status.code().unwrap_or(-1), output }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Spawns a long-running node command and waits for its description line.
fn spawn_node(args: &[&str], nodes: &mut Nodes) -> Result<Value, String> {
    let mut child = Command::new(BIN).args(args).stdout(Stdio::piped()).stderr(Stdio::null()).spawn().map_err(|e| e.to_string())?;
    let stdout = child.stdout.take().unwrap();
    nodes.0.push(child);
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut line = String::new();
        let _ = BufReader::new(stdout).read_line(&mut line);
        let _ = tx.send(line);
    });
    let line = rx.recv_timeout(Duration::from_secs(30)).map_err(|_| format!("{args:?}: no description line"))?;
    let v: Value = serde_json::from_str(&line).map_err(|e| format!("{args:?}: {e}: {line}"))?;
    if v.get("error").is_some() {
        return Err(format!("{args:?} failed: {v}"));
    }
    Ok(v)
}

pub struct Lifecycle {
    pub steps: Vec<Step>,
    pub elapsed: Duration,
    pub tampered_receipt: Step,
}

impl Lifecycle {
    pub fn failures(&self) -> Vec<String> {
        self.steps.iter().filter(|s| s.code != 0).map(|s| format!("{} exited {}: {}", s.name, s.code, s.output)).collect()
    }
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// start, join x2, trust a new code measurement, register the app policy,
/// open, mint, issue claims, register an asset, DvP, then audit the ledger
/// and a receipt offline.
pub fn lifecycle(dir: &Path) -> Result<Lifecycle, String> {
    let t = Instant::now();
    let mut steps = Vec::new();
    let mut nodes = Nodes::default();
    let step = |args: Vec<String>, steps: &mut Vec<Step>| -> Value {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let st = run(&refs);
        let out = st.output.clone();
        steps.push(st);
        out
    };
    let key = |n: &str| dir.join(format!("{n}.key"));
    let mut pubs = serde_json::Map::new();
    for n in ["m0", "m1", "m2", "cb", "bankA", "bankB", "client1"] {
        let v = step(vec!["keygen".into(), "--out".into(), s(&key(n))], &mut steps);
        pubs.insert(n.into(), v["public_key"].clone());
    }
    step(vec!["keygen".into(), "--out".into(), s(&dir.join("platform.json")), "--platform".into(), "emu-0".into()], &mut steps);
    std::fs::write(dir.join("app.blob"), b"settlement-app build 1").map_err(|e| e.to_string())?;
    std::fs::write(dir.join("app-v2.blob"), b"settlement-app build 2").map_err(|e| e.to_string())?;
    let v2 = step(vec!["enclave".into(), "measure".into(), "--code-blob".into(), s(&dir.join("app-v2.blob"))], &mut steps);

    let enclave = json!({ "platform_id": "emu-0", "platform_path": "platform.json", "code_blob_path": "app.blob" });
    let addr = |_: ()| format!("127.0.0.1:{}", free_port());
    let rpc0 = addr(());
    let members: Vec<Value> = ["m0", "m1", "m2"].iter().map(|m| json!({ "id": m, "public_key": pubs[*m] })).collect();
    let n0 = json!({
        "version": 1,
        "start": {
            "initial_members": members,
            "node_address": addr(()),
            "rpc_address": rpc0,
            "ledger_path": "n0/ledger.bin",
        },
        "enclave": enclave,
        "data_dir": s(&dir.join("n0")),
    });
    std::fs::write(dir.join("n0.json"), n0.to_string()).map_err(|e| e.to_string())?;
    let d0 = spawn_node(&["node", "start", "--config", &s(&dir.join("n0.json"))], &mut nodes)?;
    for i in 1..=2 {
        let cfg = json!({
            "version": 1,
            "join": { "target_rpc_address": rpc0, "node_address": addr(()), "rpc_address": addr(()), "ledger_path": format!("n{i}/ledger.bin") },
            "enclave": enclave,
            "data_dir": s(&dir.join(format!("n{i}"))),
        });
        let p = dir.join(format!("n{i}.json"));
        std::fs::write(&p, cfg.to_string()).map_err(|e| e.to_string())?;
        spawn_node(&["node", "join", "--config", &s(&p)], &mut nodes)?;
    }

    let gov = |member: &str| vec!["--rpc".to_string(), rpc0.clone(), "--member".into(), member.into(), "--key".into(), s(&key(member))];
    let pass = |action: Value, steps: &mut Vec<Step>| {
        let mut a = vec!["gov".to_string(), "propose".into()];
        a.extend(gov("m0"));
        a.extend(["--action".into(), action.to_string()]);
        let id = step(a, steps)["proposal_id"].as_u64().unwrap_or(u64::MAX);
        for m in ["m0", "m1"] {
            let mut a = vec!["gov".to_string(), "vote".into()];
            a.extend(gov(m));
            a.extend(["--proposal".into(), id.to_string(), "--ballot".into(), "yes".into()]);
            step(a, steps);
        }
    };
    pass(json!({ "type": "add_trusted_measurement", "measurement": v2["measurement"] }), &mut steps);
    let party = |id: &str, role: &str, intermediary: Option<&str>| {
        let mut p = json!({ "party_id": id, "role": role, "public_key": pubs[id] });
        if let Some(i) = intermediary {
            p["intermediary"] = json!(i);
        }
        p
    };
    let parties = vec![
        party("cb", "central_bank", None),
        party("bankA", "intermediary", None),
        party("bankB", "intermediary", None),
        party("client1", "client", Some("bankA")),
    ];
    pass(json!({ "type": "register_app_policy", "policy": { "model": "account", "parties": parties } }), &mut steps);
    pass(json!({ "type": "transition_service_to_open" }), &mut steps);

    let app = |op: &str, party: &str, body: Value, cosigner: Option<&str>| {
        let mut a = vec!["app".to_string(), op.into(), "--rpc".into(), rpc0.clone(), "--party".into(), party.into(), "--key".into(), s(&key(party))];
        if let Some(c) = cosigner {
            a.extend(["--cosigner".into(), c.into(), "--cosigner-key".into(), s(&key(c))]);
        }
        a.extend(["--body".into(), body.to_string()]);
        a
    };
    step(app("mint", "cb", json!({ "to": "bankA", "amount": 1000 }), None), &mut steps);
    step(app("mint", "cb", json!({ "to": "bankB", "amount": 1000 }), None), &mut steps);
    step(app("issue-claim", "bankA", json!({ "intermediary": "bankA", "client": "client1", "amount": 300 }), None), &mut steps);
    step(app("register-asset", "bankA", json!({ "asset_id": "BOND-1", "quantity": 100, "initial_holder": "bankA" }), None), &mut steps);
    let dvp = step(
        app(
            "dvp",
            "bankA",
            json!({ "instruction_id": "dvp-1", "seller": "bankA", "buyer": "bankB", "asset_id": "BOND-1", "quantity": 10, "price": 250, "privacy": "private" }),
            Some("bankB"),
        ),
        &mut steps,
    );
    let seqno = dvp["seqno"].as_u64().unwrap_or(0);
    let receipt = dir.join("dvp.receipt");
    step(vec!["node".into(), "receipt".into(), "--rpc".into(), rpc0.clone(), "--seqno".into(), seqno.to_string(), "--out".into(), s(&receipt)], &mut steps);
    drop(nodes);

    let service_key = dir.join("n0/service_identity.pub");
    let _ = d0;
    step(vec!["audit".into(), "verify-chain".into(), s(&dir.join("n0/ledger.bin")), "--service-key".into(), s(&service_key)], &mut steps);
    step(vec!["audit".into(), "verify-receipt".into(), s(&receipt), "--service-key".into(), s(&service_key)], &mut steps);
    let elapsed = t.elapsed();

    let mut bytes = std::fs::read(&receipt).map_err(|e| e.to_string())?;
    bytes[12] ^= 0x01;
    let bad = dir.join("tampered.receipt");
    std::fs::write(&bad, bytes).map_err(|e| e.to_string())?;
    let tampered_receipt = run(&["audit", "verify-receipt", &s(&bad), "--service-key", &s(&service_key)]);
    Ok(Lifecycle { steps, elapsed, tampered_receipt })
}

pub fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("conledger-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}
