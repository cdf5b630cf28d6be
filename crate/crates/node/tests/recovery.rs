use std::time::{Duration, Instant};

use conledger_core::ledger::{audit, verify_receipt, ChainStatus};
use conledger_core::service::Response;
use conledger_core::settlement::TokenModel;
use conledger_core::testkit::Consortium;
use conledger_node::bench;
use conledger_node::cluster::LocalCluster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};

/// Retries through elections; a write that timed out may still have landed.
fn write(cl: &LocalCluster, req: &conledger_core::service::SignedRequest) -> Option<Response> {
    let t = Instant::now();
    while t.elapsed() < Duration::from_secs(10) {
        match cl.request(req) {
            Ok(r) if r.is_ok() => return Some(r),
            Ok(r) if r.status == 409 => return Some(r),
            _ => std::thread::sleep(Duration::from_millis(50)),
        }
    }
    None
}

fn snapshot(cl: &LocalCluster, c: &Consortium, i: usize) -> Value {
    let node = cl.node(i).unwrap();
    let mut out = json!({});
    for p in ["bankA", "bankB", "client1"] {
        out[p] = node.request(c.app("cb", "/app/balance", json!({ "party": p }))).body;
    }
    out
}

#[test]
fn killed_nodes_rejoin_with_identical_state() {
    for trial in 0..20u64 {
        let tmp = tempfile::tempdir().unwrap();
        let seed = 500 + trial;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut cl = LocalCluster::start(tmp.path(), seed, trial % 2 == 0, 3).unwrap();
        cl.join().unwrap();
        cl.join().unwrap();
        cl.open(if trial % 3 == 0 { TokenModel::Utxo } else { TokenModel::Account }).unwrap();
        let c = Consortium::new(seed, trial % 2 == 0);
        write(&cl, &c.app("cb", "/app/mint", json!({ "to": "bankA", "amount": 100_000 }))).expect("mint");

        let victim = rng.gen_range(0..3);
        let (kill_at, back_at) = (rng.gen_range(5..20), rng.gen_range(25..40));
        let mut seqnos = Vec::new();
        for k in 0..50 {
            if k == kill_at {
                cl.kill(victim);
            }
            if k == back_at {
                cl.restart(victim).unwrap();
            }
            let req = if k % 7 == 3 {
                c.app("bankA", "/app/issue-claim", json!({ "intermediary": "bankA", "client": "client1", "amount": 5, "privacy": "private" }))
            } else {
                c.app("bankA", "/app/transfer", json!({ "from": "bankA", "to": "bankB", "amount": rng.gen_range(1..50) }))
            };
            let r = write(&cl, &req).unwrap_or_else(|| panic!("trial {trial}: write {k} never succeeded"));
            seqnos.extend(r.seqno.filter(|_| r.is_ok()));
        }

        assert!(cl.wait_for(|| cl.leader().is_some(), Duration::from_secs(10)));
        let leader = cl.leader().unwrap();
        let top = cl.status(leader).unwrap()["applied_index"].as_u64().unwrap();
        assert!(cl.wait_applied(top, Duration::from_secs(20)), "trial {trial}: node {victim} did not catch up");
        let want = snapshot(&cl, &c, leader);
        for i in 0..3 {
            assert_eq!(snapshot(&cl, &c, i), want, "trial {trial}: node {i} (victim {victim}) diverged");
        }

        // every acknowledged write has a receipt that verifies
        let node = cl.node(leader).unwrap();
        for s in &seqnos {
            let r = bench::wait_receipt(node.rpc_address.to_string(), *s).unwrap();
            assert!(verify_receipt(&r, &node.service_identity), "trial {trial}: receipt for {s}");
        }
        let ledgers: Vec<_> = (0..3).map(|i| cl.node(i).unwrap().ledger_path.clone()).collect();
        let key = node.service_identity;
        cl.shutdown();
        for l in ledgers {
            assert!(matches!(audit::verify_chain(&l, &key).unwrap(), ChainStatus::Ok { .. }), "trial {trial}: {}", l.display());
        }
    }
}

#[test]
fn genesis_replays_to_the_initial_constitution_and_members() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cl = LocalCluster::start(tmp.path(), 31, true, 1).unwrap();
    cl.stop(0).unwrap();
    cl.restart(0).unwrap();
    assert!(cl.wait_for(|| cl.leader() == Some(0), Duration::from_secs(10)));
    let svc = cl.request(&conledger_core::service::SignedRequest::anonymous("/gov/service", json!({}))).unwrap().body;
    assert_eq!(svc["constitution_version"], 1);
    assert_eq!(svc["phase"], "opening");
    let c = Consortium::new(31, true);
    let members = svc["members"].as_object().unwrap();
    assert_eq!(members.len(), c.members.len());
    for (id, k) in &c.members {
        assert_eq!(members[id]["public_key"], json!(k.public()));
        assert_eq!(members[id]["status"], "active");
    }
    cl.shutdown();
}
