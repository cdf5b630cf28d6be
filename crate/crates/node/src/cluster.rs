//! In-process cluster on loopback, for tests and the benchmark harness.

use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use conledger_core::governance::Action;
use conledger_core::service::{Response, SignedRequest};
use conledger_core::settlement::TokenModel;
use conledger_core::testkit::{Consortium, BUILD_ID};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use crate::client::Client;
use crate::config::{EnclaveConfig, JoinConfig, MemberEntry, NodeConfig, StartConfig};
use crate::runtime::{join_node, restart_node, start_node, NodeError, NodeHandle};
use crate::storage;

pub struct LocalCluster {
    pub root: PathBuf,
    pub consortium: Consortium,
    pub nodes: Vec<Option<NodeHandle>>,
    pub configs: Vec<NodeConfig>,
    pub confidential: bool,
    pub seed: u64,
}

fn loopback() -> String {
    "127.0.0.1:0".into()
}

impl LocalCluster {
    /// Writes platform and code files under `root` and starts the first
    /// node. Identities for `size - 1` joiners are created up front and
    /// allow-listed, which is what admits them when confidential mode is off.
    pub fn start(root: &Path, seed: u64, confidential: bool, size: usize) -> Result<Self, NodeError> {
        std::fs::create_dir_all(root)?;
        let consortium = Consortium::new(seed, confidential);
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6e6f6465);
        let mut allowed_nodes = Vec::new();
        for i in 1..size.max(1) {
            let dir = storage::DataDir::create(&root.join(format!("n{i}")))?;
            allowed_nodes.push(dir.load_or_create_identity(&mut rng)?.public());
        }
        storage::save_platform(&root.join("platform.json"), &consortium.platform)?;
        std::fs::write(root.join("app.blob"), conledger_core::enclave::code_blob(b"settlement-app", BUILD_ID))?;
        let cfg = NodeConfig {
            version: 1,
            start: Some(StartConfig {
                constitution_path: None,
                initial_members: consortium.members.iter().map(|(id, k)| MemberEntry { id: id.clone(), public_key: k.public() }).collect(),
                node_address: loopback(),
                rpc_address: loopback(),
                ledger_path: root.join("n0/ledger.bin"),
                trusted_platforms: Default::default(),
                allowed_nodes,
            }),
            join: None,
            enclave: enclave_config(root),
            confidential_mode: confidential,
            data_dir: Some(root.join("n0")),
        };
        let h = start_node(&cfg)?;
        let cfg = pin_addresses(cfg, &h);
        let c = LocalCluster { root: root.to_path_buf(), consortium, nodes: vec![Some(h)], configs: vec![cfg], confidential, seed };
        c.wait_for(|| c.status(0).is_some_and(|s| s["phase"] == "opening"), Duration::from_secs(10))
            .then_some(())
            .ok_or_else(|| NodeError::Protocol("first node did not come up".into()))?;
        Ok(c)
    }

    /// Adds a node through the first live node.
    pub fn join(&mut self) -> Result<usize, NodeError> {
        self.join_with(enclave_config(&self.root))
    }

    /// Joins with the given platform and code blob, e.g. to try an
    /// unendorsed build.
    pub fn join_with(&mut self, enclave: EnclaveConfig) -> Result<usize, NodeError> {
        let i = self.configs.len();
        let target = self.any_rpc().ok_or_else(|| NodeError::Protocol("no live node to join through".into()))?;
        let cfg = NodeConfig {
            version: 1,
            start: None,
            join: Some(JoinConfig {
                target_rpc_address: target,
                node_address: loopback(),
                rpc_address: loopback(),
                ledger_path: self.root.join(format!("n{i}/ledger.bin")),
            }),
            enclave,
            confidential_mode: self.confidential,
            data_dir: Some(self.root.join(format!("n{i}"))),
        };
        let h = join_node(&cfg)?;
        self.configs.push(pin_addresses(cfg, &h));
        self.nodes.push(Some(h));
        Ok(i)
    }

    /// Registers the app policy and opens the service.
    pub fn open(&mut self, model: TokenModel) -> Result<(), NodeError> {
        let c = &self.consortium;
        let actions = [Action::RegisterAppPolicy { policy: c.policy(model) }, Action::TransitionServiceToOpen];
        let mut client = self.client();
        let mut next = self.gov_next_proposal()?;
        for a in actions {
            for r in c.passing(next, &a) {
                let resp = client.call_with_retry(&r, 5)?;
                if !resp.is_ok() {
                    return Err(NodeError::Protocol(format!("governance step failed: {}", resp.body)));
                }
            }
            next += 1;
        }
        Ok(())
    }

    fn gov_next_proposal(&self) -> Result<u64, NodeError> {
        let r = self.client().call_with_retry(&SignedRequest::anonymous("/gov/service", json!({})), 5)?;
        Ok(r.body["proposal_count"].as_u64().unwrap_or(0))
    }

    pub fn node(&self, i: usize) -> Option<&NodeHandle> {
        self.nodes.get(i).and_then(Option::as_ref)
    }

    pub fn any_rpc(&self) -> Option<String> {
        self.nodes.iter().flatten().next().map(|h| h.rpc_address.to_string())
    }

    pub fn client(&self) -> Client {
        Client::new(self.leader_rpc().or_else(|| self.any_rpc()).unwrap_or_default())
    }

    pub fn status(&self, i: usize) -> Option<serde_json::Value> {
        let r = self.node(i)?.status();
        r.is_ok().then_some(r.body)
    }

    pub fn leader(&self) -> Option<usize> {
        (0..self.nodes.len()).find(|i| self.status(*i).is_some_and(|s| s["role"] == "leader"))
    }

    pub fn leader_rpc(&self) -> Option<String> {
        self.leader().and_then(|i| self.node(i)).map(|h| h.rpc_address.to_string())
    }

    pub fn request(&self, req: &SignedRequest) -> std::io::Result<Response> {
        self.client().call_with_retry(req, 5)
    }

    pub fn wait_for(&self, mut f: impl FnMut() -> bool, limit: Duration) -> bool {
        let t = Instant::now();
        while t.elapsed() < limit {
            if f() {
                return true;
            }
            thread::sleep(Duration::from_millis(20));
        }
        f()
    }

    /// Waits until every live node has applied at least `index`.
    pub fn wait_applied(&self, index: u64, limit: Duration) -> bool {
        self.wait_for(
            || (0..self.nodes.len()).filter(|i| self.node(*i).is_some()).all(|i| self.status(i).is_some_and(|s| s["applied_index"].as_u64() >= Some(index))),
            limit,
        )
    }

    pub fn kill(&mut self, i: usize) {
        if let Some(h) = self.nodes[i].take() {
            h.kill();
        }
    }

    pub fn stop(&mut self, i: usize) -> Result<(), NodeError> {
        match self.nodes[i].take() {
            Some(h) => h.shutdown(),
            None => Ok(()),
        }
    }

    pub fn restart(&mut self, i: usize) -> Result<(), NodeError> {
        let h = restart_node(&self.configs[i])?;
        self.nodes[i] = Some(h);
        Ok(())
    }

    pub fn shutdown(mut self) {
        for i in 0..self.nodes.len() {
            let _ = self.stop(i);
        }
    }
}

pub fn enclave_config(root: &Path) -> EnclaveConfig {
    EnclaveConfig {
        platform_id: conledger_core::testkit::PLATFORM_ID.into(),
        platform_path: root.join("platform.json"),
        code_blob_path: root.join("app.blob"),
    }
}

/// Replaces ephemeral ports with the bound ones so a restart reuses them.
fn pin_addresses(mut cfg: NodeConfig, h: &NodeHandle) -> NodeConfig {
    if let Some(s) = &mut cfg.start {
        s.node_address = h.node_address.to_string();
        s.rpc_address = h.rpc_address.to_string();
    }
    if let Some(j) = &mut cfg.join {
        j.node_address = h.node_address.to_string();
        j.rpc_address = h.rpc_address.to_string();
    }
    cfg
}
