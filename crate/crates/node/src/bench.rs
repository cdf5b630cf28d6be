//! Load generation, KPI collection and security probes against an
//! in-process loopback cluster.
//!
//! Report schemas (field order is the CSV column order):
//!
//! - `report.csv` / `report.json`: one [`SuiteRow`] per scenario.
//! - `scaling.csv`: one [`ScalingRow`] per cluster size.
//! - `probes.json`: the [`ProbeResult`]s of scenarios with `probes: true`.
//!
//! All results are single-host figures: every replica shares one machine.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use conledger_core::codec::Canonical;
use conledger_core::crypto::{hash, Digest, KeyPair};
use conledger_core::enclave::Platform;
use conledger_core::ledger::receipt::{verify_receipt, Receipt};
use conledger_core::ledger::{audit, EntryKind, Ledger, LedgerConfig};
use conledger_core::service::SignedRequest;
use conledger_core::settlement::TokenModel;
use conledger_core::testkit::{Consortium, PLATFORM_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::client::Client;
use crate::cluster::{enclave_config, LocalCluster};
use crate::runtime::NodeError;
use crate::storage;

/// Fraction of failed requests above which a run is flagged degraded.
pub const DEGRADED_ERROR_RATE: f64 = 0.01;

const ASSET: &str = "BENCH-BOND";
const FUNDING: u64 = 1 << 40;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cluster setup failed: {0}")]
    Setup(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report encoding: {0}")]
    Csv(#[from] csv::Error),
    #[error("report encoding: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<storage::StorageError> for BenchError {
    fn from(e: storage::StorageError) -> Self {
        BenchError::Setup(e.to_string())
    }
}

impl From<NodeError> for BenchError {
    fn from(e: NodeError) -> Self {
        BenchError::Setup(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadMix {
    #[serde(default)]
    pub transfer: f64,
    #[serde(default)]
    pub dvp: f64,
    #[serde(default)]
    pub mint: f64,
    #[serde(default)]
    pub query: f64,
}

impl WorkloadMix {
    pub fn transfers_only() -> Self {
        WorkloadMix { transfer: 1.0, dvp: 0.0, mint: 0.0, query: 0.0 }
    }

    fn pick(&self, x: f64) -> OpKind {
        let mut acc = self.transfer;
        if x < acc {
            return OpKind::Transfer;
        }
        acc += self.dvp;
        if x < acc {
            return OpKind::Dvp;
        }
        acc += self.mint;
        if x < acc {
            return OpKind::Mint;
        }
        if self.query > 0.0 {
            OpKind::Query
        } else {
            OpKind::Transfer
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub cluster_size: usize,
    pub confidential_mode: bool,
    pub workload_mix: WorkloadMix,
    #[serde(default)]
    pub privacy_fraction: f64,
    /// Offered ops/s across all clients; `null` means as fast as possible.
    #[serde(default)]
    pub target_rate: Option<f64>,
    pub duration_secs: f64,
    pub seed: u64,
    /// Stop after this many requests even if time remains.
    #[serde(default)]
    pub max_ops: Option<u64>,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default)]
    pub probes: bool,
}

fn default_clients() -> usize {
    32
}

impl Scenario {
    pub fn validate(&self) -> Result<(), BenchError> {
        let m = &self.workload_mix;
        let parts = [m.transfer, m.dvp, m.mint, m.query];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(BenchError::Invalid(format!("{}: workload_mix must be fractions summing to 1", self.name)));
        }
        if self.cluster_size == 0 {
            return Err(BenchError::Invalid(format!("{}: cluster_size must be at least 1", self.name)));
        }
        if !(0.0..=1.0).contains(&self.privacy_fraction) {
            return Err(BenchError::Invalid(format!("{}: privacy_fraction must be in [0, 1]", self.name)));
        }
        if self.target_rate.is_some_and(|r| !(r > 0.0)) || !(self.duration_secs > 0.0) || self.clients == 0 {
            return Err(BenchError::Invalid(format!("{}: target_rate, duration_secs and clients must be positive", self.name)));
        }
        Ok(())
    }
}

/// A scenario file holds one scenario, a list, or `{"scenarios": [...]}`.
pub fn parse_scenarios(text: &str) -> Result<Vec<Scenario>, BenchError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum File {
        One(Scenario),
        Many(Vec<Scenario>),
        Wrapped { scenarios: Vec<Scenario> },
    }
    let v: Value = serde_json::from_str(text)?;
    let list = match serde_json::from_value::<File>(v.clone()) {
        Ok(File::One(s)) => vec![s],
        Ok(File::Many(l)) | Ok(File::Wrapped { scenarios: l }) => l,
        // re-parse as a single scenario for a pointed error message
        Err(_) => vec![serde_json::from_value::<Scenario>(v)?],
    };
    if list.is_empty() {
        return Err(BenchError::Invalid("no scenarios".into()));
    }
    for s in &list {
        s.validate()?;
    }
    Ok(list)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Transfer,
    Dvp,
    Mint,
    Query,
}

/// One planned request. The plan is a pure function of the seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannedOp {
    pub k: u64,
    pub kind: OpKind,
    pub path: String,
    pub body: Value,
}

pub fn plan_op(scenario: &Scenario, k: u64) -> PlannedOp {
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let kind = scenario.workload_mix.pick(rng.gen());
    let private = rng.gen::<f64>() < scenario.privacy_fraction;
    let (a, b) = if rng.gen() { ("bankA", "bankB") } else { ("bankB", "bankA") };
    let amount = rng.gen_range(1..=10u64);
    let (path, mut body) = match kind {
        OpKind::Transfer => ("/app/transfer", json!({ "from": a, "to": b, "amount": amount })),
        OpKind::Mint => ("/app/mint", json!({ "to": a, "amount": amount })),
        OpKind::Dvp => (
            "/app/dvp",
            json!({ "instruction_id": format!("bench-{k}"), "seller": "bankA", "buyer": "bankB", "asset_id": ASSET, "quantity": 1, "price": amount }),
        ),
        OpKind::Query => ("/app/balance", json!({})),
    };
    if private && kind != OpKind::Query {
        body["privacy"] = json!("private");
    }
    PlannedOp { k, kind, path: path.into(), body }
}

fn signed(c: &Consortium, op: &PlannedOp) -> SignedRequest {
    match op.kind {
        OpKind::Transfer => c.app(op.body["from"].as_str().unwrap_or("bankA"), &op.path, op.body.clone()),
        OpKind::Mint => c.app("cb", &op.path, op.body.clone()),
        OpKind::Dvp => c.app_cosigned("bankA", "bankB", &op.path, op.body.clone()),
        OpKind::Query => c.app("bankA", &op.path, op.body.clone()),
    }
}

/// Digest over the canonical JSON of the first `n` planned ops.
pub fn trace_digest(scenario: &Scenario, n: u64) -> Digest {
    let mut buf = Vec::new();
    for k in 0..n {
        buf.extend(serde_json::to_vec(&plan_op(scenario, k)).expect("serializes"));
        buf.push(b'\n');
    }
    hash(&buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: Scenario,
    pub issued_ops: u64,
    pub completed_ops: u64,
    pub error_count: u64,
    pub achieved_tps: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub latency_p99_ms: f64,
    pub bytes_ledger_growth: u64,
    /// Heap high-water mark while the load ran, when [`PeakAlloc`] is the
    /// global allocator.
    pub peak_memory_estimate: Option<u64>,
    /// Application entries in the ledger after the run.
    pub committed_app_entries: u64,
    /// Every replica's ledger passed `verify_chain` afterwards.
    pub chain_ok: bool,
    pub trace_digest: String,
    pub elapsed_secs: f64,
    pub degraded: bool,
    pub errors_by_code: BTreeMap<String, u64>,
    pub probes: Vec<ProbeResult>,
}

/// Nearest-rank percentile over sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Default)]
struct Samples {
    latencies_ms: Vec<f64>,
    errors: BTreeMap<String, u64>,
    issued: u64,
}

/// Starts a cluster for `scenario` under `work_dir`, drives the load and
/// tears the cluster down.
pub fn run_scenario(scenario: &Scenario, work_dir: &Path) -> Result<BenchReport, BenchError> {
    scenario.validate()?;
    let root = work_dir.join(format!("{}-{}", sanitize(&scenario.name), scenario.seed));
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }
    let mut cluster = LocalCluster::start(&root, scenario.seed, scenario.confidential_mode, scenario.cluster_size)?;
    let res = drive(scenario, &mut cluster);
    let ledger_paths: Vec<PathBuf> = cluster.configs.iter().map(|c| c.ledger_path().to_path_buf()).collect();
    let service_identity = cluster.node(0).map(|h| h.service_identity);
    cluster.shutdown();
    let mut report = res?;
    let sid = service_identity.ok_or_else(|| BenchError::Setup("first node vanished".into()))?;
    report.chain_ok = ledger_paths.iter().all(|p| matches!(audit::verify_chain(p, &sid), Ok(audit::ChainStatus::Ok { .. })));
    let (ledger, _) = Ledger::open(&ledger_paths[0], LedgerConfig { auto_sign: false, ..LedgerConfig::default() })
        .map_err(|e| BenchError::Setup(e.to_string()))?;
    report.committed_app_entries = ledger.entries().iter().filter(|e| e.kind == EntryKind::App).count() as u64;
    Ok(report)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn setup(cluster: &mut LocalCluster, size: usize) -> Result<(), BenchError> {
    for _ in 1..size {
        cluster.join()?;
    }
    cluster.open(TokenModel::Account)?;
    let c = &cluster.consortium;
    let steps = [
        c.app("cb", "/app/mint", json!({ "to": "bankA", "amount": FUNDING })),
        c.app("cb", "/app/mint", json!({ "to": "bankB", "amount": FUNDING })),
        c.app("bankA", "/app/register-asset", json!({ "asset_id": ASSET, "quantity": FUNDING, "initial_holder": "bankA" })),
    ];
    for s in steps {
        let r = cluster.request(&s)?;
        if !r.is_ok() {
            return Err(BenchError::Setup(format!("{} failed: {}", s.path, r.body)));
        }
    }
    Ok(())
}

fn drive(s: &Scenario, cluster: &mut LocalCluster) -> Result<BenchReport, BenchError> {
    setup(cluster, s.cluster_size)?;
    let leader = cluster.leader().ok_or_else(|| BenchError::Setup("no leader after setup".into()))?;
    let ledger_before = cluster.status(leader).and_then(|v| v["ledger_bytes"].as_u64()).unwrap_or(0);
    let rpc = cluster.leader_rpc().ok_or_else(|| BenchError::Setup("no leader after setup".into()))?;
    let consortium = Arc::new(Consortium::new(s.seed, s.confidential_mode));
    let samples = Arc::new(Mutex::new(Samples::default()));
    let next = Arc::new(AtomicUsize::new(0));
    PeakAlloc::reset_peak();
    let start = Instant::now();
    let deadline = start + Duration::from_secs_f64(s.duration_secs);
    let cap = s.max_ops.unwrap_or(u64::MAX);
    let workers: Vec<_> = (0..s.clients)
        .map(|_| {
            let (s, c, samples, next, rpc) = (s.clone(), consortium.clone(), samples.clone(), next.clone(), rpc.clone());
            thread::spawn(move || {
                let mut client = Client::new(rpc);
                let mut local = Samples::default();
                loop {
                    let k = next.fetch_add(1, Ordering::Relaxed) as u64;
                    if k >= cap {
                        break;
                    }
                    if let Some(rate) = s.target_rate {
                        let at = start + Duration::from_secs_f64(k as f64 / rate);
                        if at >= deadline {
                            break;
                        }
                        let now = Instant::now();
                        if at > now {
                            thread::sleep(at - now);
                        }
                    } else if Instant::now() >= deadline {
                        break;
                    }
                    let op = plan_op(&s, k);
                    let req = signed(&c, &op);
                    local.issued += 1;
                    let t = Instant::now();
                    match client.call(&req) {
                        Ok(r) if r.is_ok() => local.latencies_ms.push(t.elapsed().as_secs_f64() * 1e3),
                        Ok(r) => *local.errors.entry(r.body["error"].as_str().unwrap_or("unknown").to_string()).or_default() += 1,
                        Err(e) => *local.errors.entry(format!("io:{:?}", e.kind())).or_default() += 1,
                    }
                }
                let mut all = samples.lock().expect("no poisoned workers");
                all.latencies_ms.extend(local.latencies_ms);
                all.issued += local.issued;
                for (k, v) in local.errors {
                    *all.errors.entry(k).or_default() += v;
                }
            })
        })
        .collect();
    for w in workers {
        w.join().map_err(|_| BenchError::Setup("load generator panicked".into()))?;
    }
    let mut elapsed = start.elapsed().as_secs_f64();
    let peak = PeakAlloc::peak();
    let samples = std::mem::take(&mut *samples.lock().expect("workers joined"));
    let mut lat = samples.latencies_ms;
    lat.sort_by(f64::total_cmp);
    let completed = lat.len() as u64;
    let error_count: u64 = samples.errors.values().sum();
    if let Some(rate) = s.target_rate {
        // measured over the offered schedule, so achieved never exceeds offered
        elapsed = elapsed.max(samples.issued as f64 / rate);
    }
    let ledger_after = cluster.leader().and_then(|l| cluster.status(l)).and_then(|v| v["ledger_bytes"].as_u64()).unwrap_or(ledger_before);
    let probes = if s.probes { attack_probes(cluster)? } else { vec![] };
    Ok(BenchReport {
        scenario: s.clone(),
        issued_ops: samples.issued,
        completed_ops: completed,
        error_count,
        achieved_tps: if elapsed > 0.0 { completed as f64 / elapsed } else { 0.0 },
        latency_p50_ms: percentile(&lat, 50.0),
        latency_p95_ms: percentile(&lat, 95.0),
        latency_p99_ms: percentile(&lat, 99.0),
        bytes_ledger_growth: ledger_after.saturating_sub(ledger_before),
        peak_memory_estimate: peak,
        committed_app_entries: 0,
        chain_ok: false,
        trace_digest: trace_digest(s, samples.issued).to_hex(),
        elapsed_secs: elapsed,
        degraded: samples.issued > 0 && error_count as f64 > DEGRADED_ERROR_RATE * samples.issued as f64,
        errors_by_code: samples.errors,
        probes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: String,
    /// The attack was stopped.
    pub rejected: bool,
    /// A failure is the documented outcome for this mode.
    pub expected_baseline: bool,
    pub detail: String,
}

pub const SENTINEL: &[u8; 16] = b"SENTINEL-7f3a9c2";

/// Runs the fixed probe set against a live, open cluster.
pub fn attack_probes(cluster: &mut LocalCluster) -> Result<Vec<ProbeResult>, BenchError> {
    let c = Consortium::new(cluster.seed, cluster.confidential);
    let confidential = cluster.confidential;
    let mut out = Vec::new();

    // sentinel plaintext on disk
    let memo = std::str::from_utf8(SENTINEL).expect("ascii");
    let r = cluster.request(&c.app("bankA", "/app/transfer", json!({ "from": "bankA", "to": "bankB", "amount": 1, "privacy": "private", "memo": memo })))?;
    let seqno = r.seqno.filter(|_| r.is_ok()).ok_or_else(|| BenchError::Setup(format!("probe transfer failed: {}", r.body)))?;
    let applied = cluster.leader().and_then(|l| cluster.status(l)).and_then(|v| v["applied_index"].as_u64()).unwrap_or(0);
    cluster.wait_applied(applied, Duration::from_secs(10));
    let found = files_containing(&cluster.root, SENTINEL)?;
    out.push(ProbeResult {
        probe: "sentinel_plaintext".into(),
        rejected: found.is_empty(),
        expected_baseline: !confidential,
        detail: if found.is_empty() { "sentinel absent from every persisted file".into() } else { format!("sentinel found in {}", found.join(", ")) },
    });

    // join with a quote from a platform key nobody trusts
    let voters_before = cluster.status(0).map(|v| v["voters"].clone());
    let mut rng = ChaCha20Rng::seed_from_u64(0xf0f0);
    let rogue = Platform::generate(PLATFORM_ID, &mut rng);
    let rogue_path = cluster.root.join("rogue-platform.json");
    storage::save_platform(&rogue_path, &rogue)?;
    let mut enclave = enclave_config(&cluster.root);
    enclave.platform_path = rogue_path;
    let outcome = cluster.join_with(enclave);
    let voters_after = cluster.status(0).map(|v| v["voters"].clone());
    let (rejected, detail) = match outcome {
        Err(NodeError::JoinDenied { reason }) => (voters_before == voters_after, format!("denied: {reason}; membership unchanged: {}", voters_before == voters_after)),
        Err(e) => (false, format!("join failed unexpectedly: {e}")),
        Ok(i) => {
            let _ = cluster.stop(i);
            (false, "forged quote was admitted".into())
        }
    };
    out.push(ProbeResult { probe: "forged_quote_join".into(), rejected, expected_baseline: !confidential, detail });

    // operator identity reading a private transaction
    let node = cluster.node(0).ok_or_else(|| BenchError::Setup("first node down".into()))?;
    let node_key = storage::load_key(&storage::DataDir(node.data_dir.clone()).node_key())?;
    let op = SignedRequest::sign(format!("/app/tx/{seqno}"), json!({}), format!("node:{}", node.node_id), &node_key);
    let r = node.request(op);
    out.push(ProbeResult {
        probe: "operator_private_read".into(),
        rejected: r.status == 403,
        expected_baseline: false,
        detail: format!("status {}", r.status),
    });

    // receipt forgery: a receipt for a made-up entry signed by another key
    let receipt = wait_receipt(node.rpc_address.to_string(), seqno)?;
    let forger = KeyPair::generate(&mut rng);
    let mut forged = receipt.clone();
    forged.entry_digest = hash(b"a transfer that never happened");
    let tampered_rejected = !verify_receipt(&forged, &node.service_identity);
    let mut resigned = forged.clone();
    resigned.root_signature = forger.sign(&conledger_core::ledger::root_signing_message(&resigned.root));
    resigned.service_identity = forger.public();
    let resigned_rejected = !verify_receipt(&resigned, &node.service_identity);
    out.push(ProbeResult {
        probe: "receipt_forgery".into(),
        rejected: verify_receipt(&receipt, &node.service_identity) && tampered_rejected && resigned_rejected,
        expected_baseline: false,
        detail: format!("honest receipt verifies; altered digest rejected: {tampered_rejected}; re-signed by foreign key rejected: {resigned_rejected}"),
    });
    Ok(out)
}

/// Fetches the receipt for `seqno`, waiting for a signature to cover it.
pub fn wait_receipt(rpc: String, seqno: u64) -> Result<Receipt, BenchError> {
    let mut client = Client::new(rpc);
    let t = Instant::now();
    loop {
        let r = client.call(&SignedRequest::anonymous(format!("/node/receipt/{seqno}"), json!({})))?;
        if r.is_ok() {
            let bytes = r.body["receipt"].as_str().and_then(|h| hex::decode(h).ok()).unwrap_or_default();
            return Receipt::from_bytes(&bytes).map_err(|e| BenchError::Setup(format!("bad receipt: {e}")));
        }
        if r.status != 409 || t.elapsed() > Duration::from_secs(10) {
            return Err(BenchError::Setup(format!("no receipt for {seqno}: {}", r.body)));
        }
        thread::sleep(Duration::from_millis(20));
    }
}

/// Relative paths of files under `root` containing `needle`.
pub fn files_containing(root: &Path, needle: &[u8]) -> std::io::Result<Vec<String>> {
    let mut hits = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if std::fs::read(&p)?.windows(needle.len()).any(|w| w == needle) {
                hits.push(p.strip_prefix(root).unwrap_or(&p).display().to_string());
            }
        }
    }
    hits.sort();
    Ok(hits)
}

/// Flat per-scenario row of the suite table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    pub cluster_size: usize,
    pub confidential_mode: bool,
    pub mix_transfer: f64,
    pub mix_dvp: f64,
    pub mix_mint: f64,
    pub mix_query: f64,
    pub privacy_fraction: f64,
    pub target_rate: Option<f64>,
    pub duration_secs: f64,
    pub seed: u64,
    pub status: RowStatus,
    pub failure: Option<String>,
    pub issued_ops: Option<u64>,
    pub completed_ops: Option<u64>,
    pub error_count: Option<u64>,
    pub achieved_tps: Option<f64>,
    pub latency_p50_ms: Option<f64>,
    pub latency_p95_ms: Option<f64>,
    pub latency_p99_ms: Option<f64>,
    pub bytes_ledger_growth: Option<u64>,
    pub peak_memory_estimate: Option<u64>,
    pub committed_app_entries: Option<u64>,
    pub chain_ok: Option<bool>,
    pub trace_digest: Option<String>,
    pub probes_rejected: Option<u64>,
    pub probes_total: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Degraded,
    Failed,
}

impl SuiteRow {
    fn from_result(s: &Scenario, r: &Result<BenchReport, BenchError>) -> Self {
        let m = s.workload_mix;
        let mut row = SuiteRow {
            name: s.name.clone(),
            cluster_size: s.cluster_size,
            confidential_mode: s.confidential_mode,
            mix_transfer: m.transfer,
            mix_dvp: m.dvp,
            mix_mint: m.mint,
            mix_query: m.query,
            privacy_fraction: s.privacy_fraction,
            target_rate: s.target_rate,
            duration_secs: s.duration_secs,
            seed: s.seed,
            status: RowStatus::Failed,
            failure: None,
            issued_ops: None,
            completed_ops: None,
            error_count: None,
            achieved_tps: None,
            latency_p50_ms: None,
            latency_p95_ms: None,
            latency_p99_ms: None,
            bytes_ledger_growth: None,
            peak_memory_estimate: None,
            committed_app_entries: None,
            chain_ok: None,
            trace_digest: None,
            probes_rejected: None,
            probes_total: None,
        };
        match r {
            Err(e) => row.failure = Some(e.to_string()),
            Ok(r) => {
                row.status = if r.degraded { RowStatus::Degraded } else { RowStatus::Ok };
                row.issued_ops = Some(r.issued_ops);
                row.completed_ops = Some(r.completed_ops);
                row.error_count = Some(r.error_count);
                row.achieved_tps = Some(r.achieved_tps);
                row.latency_p50_ms = Some(r.latency_p50_ms);
                row.latency_p95_ms = Some(r.latency_p95_ms);
                row.latency_p99_ms = Some(r.latency_p99_ms);
                row.bytes_ledger_growth = Some(r.bytes_ledger_growth);
                row.peak_memory_estimate = r.peak_memory_estimate;
                row.committed_app_entries = Some(r.committed_app_entries);
                row.chain_ok = Some(r.chain_ok);
                row.trace_digest = Some(r.trace_digest.clone());
                if !r.probes.is_empty() {
                    row.probes_rejected = Some(r.probes.iter().filter(|p| p.rejected).count() as u64);
                    row.probes_total = Some(r.probes.len() as u64);
                }
            }
        }
        row
    }
}

/// Scaling across replica counts: means over the successful rows of each
/// cluster size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub cluster_size: usize,
    pub runs: u64,
    pub mean_achieved_tps: f64,
    pub mean_latency_p99_ms: f64,
    /// Distinct committed application entry counts seen at this size.
    pub committed_app_entries: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub scaling: Vec<ScalingRow>,
    pub reports: Vec<Option<BenchReport>>,
}

pub fn scaling_table(rows: &[SuiteRow]) -> Vec<ScalingRow> {
    let mut by: BTreeMap<usize, Vec<&SuiteRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.status != RowStatus::Failed) {
        by.entry(r.cluster_size).or_default().push(r);
    }
    by.into_iter()
        .map(|(size, rs)| {
            let n = rs.len() as f64;
            let mut counts: Vec<u64> = rs.iter().filter_map(|r| r.committed_app_entries).collect();
            counts.sort_unstable();
            counts.dedup();
            ScalingRow {
                cluster_size: size,
                runs: rs.len() as u64,
                mean_achieved_tps: rs.iter().filter_map(|r| r.achieved_tps).sum::<f64>() / n,
                mean_latency_p99_ms: rs.iter().filter_map(|r| r.latency_p99_ms).sum::<f64>() / n,
                committed_app_entries: counts.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
            }
        })
        .collect()
}

/// Runs every scenario in order. A failed scenario is recorded in its row
/// and the suite moves on.
pub fn run_suite(scenarios: &[Scenario], work_dir: &Path) -> Result<SuiteReport, BenchError> {
    if scenarios.is_empty() {
        return Err(BenchError::Invalid("no scenarios".into()));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for s in scenarios {
        log::info!("running scenario {}", s.name);
        let r = run_scenario(s, work_dir);
        if let Err(e) = &r {
            log::warn!("scenario {} failed: {e}", s.name);
        }
        rows.push(SuiteRow::from_result(s, &r));
        reports.push(r.ok());
    }
    let scaling = scaling_table(&rows);
    Ok(SuiteReport { rows, scaling, reports })
}

pub fn rows_to_csv(rows: &[SuiteRow]) -> Result<String, BenchError> {
    to_csv(rows)
}

pub fn rows_from_csv(text: &str) -> Result<Vec<SuiteRow>, BenchError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `report.json`, `report.csv`, `scaling.csv` and `probes.json`.
pub fn write_reports(report: &SuiteReport, out: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(out.join("report.csv"), rows_to_csv(&report.rows)?)?;
    std::fs::write(out.join("scaling.csv"), to_csv(&report.scaling)?)?;
    let probes: BTreeMap<&str, &Vec<ProbeResult>> = report
        .reports
        .iter()
        .flatten()
        .filter(|r| !r.probes.is_empty())
        .map(|r| (r.scenario.name.as_str(), &r.probes))
        .collect();
    std::fs::write(out.join("probes.json"), serde_json::to_string_pretty(&probes)?)?;
    Ok(())
}

/// Counting wrapper around the system allocator. Install it with
/// `#[global_allocator]` to get `peak_memory_estimate` in reports.
pub struct PeakAlloc;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

impl PeakAlloc {
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    pub fn peak() -> Option<u64> {
        INSTALLED.load(Ordering::Relaxed).then(|| PEAK.load(Ordering::Relaxed) as u64)
    }
}

unsafe impl GlobalAlloc for PeakAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        // SAFETY: forwarded unchanged to the system allocator.
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
            INSTALLED.store(true, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        // SAFETY: `ptr` came from `alloc` above with the same layout.
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}
