//! Node runtime.
//!
//! One thread owns the consensus state machine and the service; listener
//! and connection threads only decode frames and post them to its mailbox.
//! Client writes are proposed to consensus and answered once applied.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use conledger_core::codec::Canonical;
use conledger_core::consensus::{EntryPayload, Message, NodeId, RaftConfig, RaftNode};
use conledger_core::crypto::{KeyPair, PublicKey};
use conledger_core::enclave::{self, measure, unwrap_secret, wrap_secret, ExchangeKey, Measurement, Platform, WrappedSecret};
use conledger_core::governance::{Genesis, MemberSpec, NodeInfo, PROPOSALS_PATH};
use conledger_core::ledger::LedgerError;
use conledger_core::service::{JoinRequest, Response, Service, ServiceCommand, ServiceError, ServiceEvent, ServiceSecrets, SignedRequest};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::client::{Client, REDIRECT};
use crate::config::{ConfigError, NodeConfig};
use crate::storage::{self, ClusterFile, DataDir, RaftStore, StorageError};
use crate::wire;

pub const TICK: Duration = Duration::from_millis(10);
/// Leader proposes a Sign command at most this often while entries are unsigned.
const SIGN_EVERY_TICKS: u64 = 5;
const CLIENT_WAIT: Duration = Duration::from_secs(10);
const PEER_QUEUE: usize = 8192;
const JOIN_PATH: &str = "/node/join";

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("ledger {0} already exists; use `node restart` to reuse it")]
    LedgerExists(PathBuf),
    #[error("join denied: {reason}")]
    JoinDenied { reason: String },
    #[error("join target {target} unreachable: {detail}")]
    Unreachable { target: String, detail: String },
    #[error("platform file holds `{found}` but the config names `{expected}`")]
    PlatformMismatch { expected: String, found: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl NodeError {
    /// Short machine-readable code for CLI error output.
    pub fn code(&self) -> &'static str {
        match self {
            NodeError::Config(_) => "config",
            NodeError::Storage(_) => "storage",
            NodeError::Service(_) | NodeError::Ledger(_) => "ledger",
            NodeError::Io(_) => "io",
            NodeError::LedgerExists(_) => "ledger_exists",
            NodeError::JoinDenied { .. } => "join_denied",
            NodeError::Unreachable { .. } => "unreachable",
            NodeError::PlatformMismatch { .. } => "platform_mismatch",
            NodeError::Protocol(_) => "protocol",
        }
    }
}

enum Event {
    Peer(Message),
    Client(SignedRequest, Sender<Response>),
    Stop { crash: bool },
}

/// What a leader hands an admitted node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JoinGrant {
    pub node_id: NodeId,
    pub initial_voters: BTreeMap<NodeId, String>,
    /// Current voters and their node addresses.
    pub peers: BTreeMap<NodeId, String>,
    pub service_identity: PublicKey,
    pub wrapped_secrets: WrappedSecret,
}

pub struct NodeHandle {
    pub node_id: NodeId,
    pub node_address: SocketAddr,
    pub rpc_address: SocketAddr,
    pub service_identity: PublicKey,
    pub data_dir: PathBuf,
    pub ledger_path: PathBuf,
    tx: Sender<Event>,
    stop: Arc<AtomicBool>,
    runtime: Option<JoinHandle<Result<(), NodeError>>>,
    listeners: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for NodeHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeHandle").field("node_id", &self.node_id).field("rpc_address", &self.rpc_address).finish()
    }
}

impl NodeHandle {
    /// Info line the CLI prints once the node is up.
    pub fn describe(&self) -> serde_json::Value {
        json!({
            "node_id": self.node_id,
            "node_address": self.node_address.to_string(),
            "rpc_address": self.rpc_address.to_string(),
            "service_identity": self.service_identity,
            "data_dir": self.data_dir,
            "ledger_path": self.ledger_path,
        })
    }

    /// Sends a request through the mailbox, bypassing the network.
    pub fn request(&self, req: SignedRequest) -> Response {
        let (tx, rx) = mpsc::channel();
        if self.tx.send(Event::Client(req, tx)).is_err() {
            return Response::error(503, "stopped", "node is not running");
        }
        rx.recv_timeout(CLIENT_WAIT).unwrap_or_else(|_| Response::error(504, "timeout", "no reply before the deadline"))
    }

    pub fn status(&self) -> Response {
        self.request(SignedRequest::anonymous("/node/status", json!({})))
    }

    pub fn is_running(&self) -> bool {
        self.runtime.as_ref().is_some_and(|h| !h.is_finished())
    }

    fn stop(mut self, crash: bool) -> Result<(), NodeError> {
        let _ = self.tx.send(Event::Stop { crash });
        let res = self.runtime.take().map(|h| h.join().unwrap_or_else(|_| Err(NodeError::Protocol("runtime panicked".into()))));
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loops
        let _ = TcpStream::connect_timeout(&self.node_address, Duration::from_millis(200));
        let _ = TcpStream::connect_timeout(&self.rpc_address, Duration::from_millis(200));
        for l in self.listeners.drain(..) {
            let _ = l.join();
        }
        res.unwrap_or(Ok(()))
    }

    /// Stops the node, flushing the ledger.
    pub fn shutdown(self) -> Result<(), NodeError> {
        self.stop(false)
    }

    /// Stops the node as a crash would: unflushed ledger bytes are lost.
    pub fn kill(self) {
        let _ = self.stop(true);
    }

    /// Blocks until the runtime exits.
    pub fn wait(mut self) -> Result<(), NodeError> {
        let res = self.runtime.take().map(|h| h.join().unwrap_or_else(|_| Err(NodeError::Protocol("runtime panicked".into()))));
        res.unwrap_or(Ok(()))
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        if self.runtime.is_some() {
            let _ = self.tx.send(Event::Stop { crash: false });
            if let Some(h) = self.runtime.take() {
                let _ = h.join();
            }
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect_timeout(&self.node_address, Duration::from_millis(200));
            let _ = TcpStream::connect_timeout(&self.rpc_address, Duration::from_millis(200));
        }
    }
}

struct Enclave {
    platform: Platform,
    measurement: Measurement,
}

fn load_enclave(cfg: &NodeConfig) -> Result<Enclave, NodeError> {
    let platform = storage::load_platform(&cfg.enclave.platform_path)?;
    if platform.id() != cfg.enclave.platform_id {
        return Err(NodeError::PlatformMismatch { expected: cfg.enclave.platform_id.clone(), found: platform.id().into() });
    }
    let blob = std::fs::read(&cfg.enclave.code_blob_path)
        .map_err(|source| ConfigError::Io { path: cfg.enclave.code_blob_path.clone(), source })?;
    Ok(Enclave { platform, measurement: measure(&blob) })
}

struct Listeners {
    node: TcpListener,
    rpc: TcpListener,
}

fn bind(cfg: &NodeConfig) -> Result<Listeners, NodeError> {
    Ok(Listeners { node: TcpListener::bind(cfg.node_address())?, rpc: TcpListener::bind(cfg.rpc_address())? })
}

fn raft_config() -> RaftConfig {
    RaftConfig::default()
}

fn os_rng() -> ChaCha20Rng {
    ChaCha20Rng::from_entropy()
}

/// Starts the first node of a new service: generates identities, writes the
/// genesis and leads a one-node cluster.
pub fn start_node(cfg: &NodeConfig) -> Result<NodeHandle, NodeError> {
    let start = cfg.start.as_ref().ok_or_else(|| ConfigError::Invalid("`node start` needs a `start` block".into()))?;
    if start.ledger_path.exists() {
        return Err(NodeError::LedgerExists(start.ledger_path.clone()));
    }
    let constitution = cfg.constitution()?;
    let enc = load_enclave(cfg)?;
    let mut rng = os_rng();
    let dir = DataDir::create(&cfg.data_dir())?;
    let node_key = dir.load_or_create_identity(&mut rng)?;
    let secrets = ServiceSecrets::generate(&mut rng);
    dir.save_secrets(&secrets, &enc.measurement, &enc.platform, &mut rng)?;
    storage::write_atomic(&dir.path("service_identity.pub"), secrets.signing_key.public().to_hex().as_bytes())?;
    if let Some(p) = start.ledger_path.parent() {
        std::fs::create_dir_all(p)?;
    }

    let l = bind(cfg)?;
    let node_addr = l.node.local_addr()?;
    let rpc_addr = l.rpc.local_addr()?;
    let mut first = NodeInfo::new(node_key.public(), node_addr.to_string(), rpc_addr.to_string());
    first.measurement = Some(enc.measurement);
    first.platform_id = Some(enc.platform.id().into());
    let mut trusted_platforms = start.trusted_platforms.clone();
    trusted_platforms.insert(enc.platform.id().into(), enc.platform.public_key());
    let mut allowed_nodes: std::collections::BTreeSet<PublicKey> = start.allowed_nodes.iter().copied().collect();
    allowed_nodes.insert(node_key.public());
    let genesis = Genesis {
        constitution,
        members: start.initial_members.iter().map(|m| MemberSpec { member_id: m.id.clone(), public_key: m.public_key }).collect(),
        service_identity: secrets.signing_key.public(),
        trusted_platforms,
        trusted_measurements: [enc.measurement].into(),
        confidential_mode: cfg.confidential_mode,
        allowed_nodes,
        first_node: first.clone(),
    };
    // reject a bad genesis before anything is written
    conledger_core::governance::GovState::genesis(genesis.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let svc = Service::create(Some(&start.ledger_path), secrets)?;
    let id = first.node_id;
    let initial: BTreeMap<NodeId, String> = [(id, node_addr.to_string())].into();
    dir.save_cluster(&ClusterFile { node_id: id, initial_voters: initial.clone() })?;
    let (store, _, _) = RaftStore::open(&dir)?;
    let raft = RaftNode::new(id, contexts(&initial), raft_config(), rng.next_u64());
    launch(Launch { cfg, dir, svc, raft, store, initial, peers: BTreeMap::new(), genesis: Some(genesis), listeners: l, rng, rx_tx: None })
}

fn contexts(m: &BTreeMap<NodeId, String>) -> BTreeMap<NodeId, Vec<u8>> {
    m.iter().map(|(k, v)| (*k, v.as_bytes().to_vec())).collect()
}

/// Joins an existing service through `join.target_rpc_address`.
pub fn join_node(cfg: &NodeConfig) -> Result<NodeHandle, NodeError> {
    let join = cfg.join.as_ref().ok_or_else(|| ConfigError::Invalid("`node join` needs a `join` block".into()))?;
    if join.ledger_path.exists() {
        return Err(NodeError::LedgerExists(join.ledger_path.clone()));
    }
    let enc = load_enclave(cfg)?;
    let mut rng = os_rng();
    let dir = DataDir::create(&cfg.data_dir())?;
    let node_key = dir.load_or_create_identity(&mut rng)?;
    let exchange = ExchangeKey::generate(&mut rng);
    let l = bind(cfg)?;
    // peers may reach us before the grant arrives; their frames wait in the mailbox
    let (tx, rx) = mpsc::channel();
    let node_addr = l.node.local_addr()?;
    let rpc_addr = l.rpc.local_addr()?;
    let req = JoinRequest {
        node_identity: node_key.public(),
        node_address: node_addr.to_string(),
        rpc_address: rpc_addr.to_string(),
        quote: Some(enclave::quote(enc.measurement, node_key.public(), &enc.platform)),
        exchange_key: hex::encode(exchange.public()),
    };
    let signed = sign_join(&req, &node_key);
    let grant = request_join(&join.target_rpc_address, &signed)?;
    let secret = unwrap_secret(&exchange, &grant.wrapped_secrets).map_err(|e| NodeError::Protocol(e.to_string()))?;
    let secrets = ServiceSecrets::from_bytes(&secret).ok_or_else(|| NodeError::Protocol("bad secret length".into()))?;
    if secrets.signing_key.public() != grant.service_identity {
        return Err(NodeError::Protocol("granted secrets do not match the service identity".into()));
    }
    dir.save_secrets(&secrets, &enc.measurement, &enc.platform, &mut rng)?;
    storage::write_atomic(&dir.path("service_identity.pub"), secrets.signing_key.public().to_hex().as_bytes())?;
    let id = req.node_id();
    dir.save_cluster(&ClusterFile { node_id: id, initial_voters: grant.initial_voters.clone() })?;
    if let Some(p) = join.ledger_path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let svc = Service::create(Some(&join.ledger_path), secrets)?;
    let (store, _, _) = RaftStore::open(&dir)?;
    let raft = RaftNode::new(id, contexts(&grant.initial_voters), raft_config(), rng.next_u64());
    launch(Launch {
        cfg,
        dir,
        svc,
        raft,
        store,
        initial: grant.initial_voters,
        peers: grant.peers,
        genesis: None,
        listeners: l,
        rng,
        rx_tx: Some((tx, rx)),
    })
}

pub fn sign_join(req: &JoinRequest, node_key: &KeyPair) -> SignedRequest {
    let body = serde_json::to_value(req).expect("serializes");
    SignedRequest::sign(JOIN_PATH, body, format!("node:{}", req.node_id()), node_key)
}

fn request_join(target: &str, signed: &SignedRequest) -> Result<JoinGrant, NodeError> {
    let mut client = Client::new(target).with_timeout(Duration::from_secs(20));
    let resp = client
        .call_with_retry(signed, 8)
        .map_err(|e| NodeError::Unreachable { target: target.into(), detail: e.to_string() })?;
    match resp.status {
        200 => serde_json::from_value(resp.body).map_err(|e| NodeError::Protocol(format!("bad join grant: {e}"))),
        403 => Err(NodeError::JoinDenied {
            reason: resp.body.get("reason").and_then(|r| r.as_str()).unwrap_or("unauthorized").to_string(),
        }),
        _ => Err(NodeError::Protocol(format!("join failed with {}: {}", resp.status, resp.body))),
    }
}

/// Restarts a node from its data directory and ledger.
pub fn restart_node(cfg: &NodeConfig) -> Result<NodeHandle, NodeError> {
    let enc = load_enclave(cfg)?;
    let mut rng = os_rng();
    let dir = DataDir(cfg.data_dir());
    let node_key = storage::load_key(&dir.node_key())?;
    let secrets = dir.load_secrets(&enc.measurement, &enc.platform)?;
    let (svc, info) = Service::open(cfg.ledger_path(), secrets)?;
    log::info!("recovered ledger: {info:?}");
    let cluster = dir.load_cluster()?;
    if node_key.public().fingerprint() != cluster.node_id {
        return Err(NodeError::Protocol("node.key does not match cluster.json".into()));
    }
    let (store, hard, log) = RaftStore::open(&dir)?;
    let raft = RaftNode::restore(
        cluster.node_id,
        contexts(&cluster.initial_voters),
        raft_config(),
        rng.next_u64(),
        hard,
        log,
        svc.applied_index(),
        0,
    );
    let l = bind(cfg)?;
    launch(Launch {
        cfg,
        dir,
        svc,
        raft,
        store,
        initial: cluster.initial_voters,
        peers: BTreeMap::new(),
        genesis: None,
        listeners: l,
        rng,
        rx_tx: None,
    })
}

struct Launch<'a> {
    cfg: &'a NodeConfig,
    dir: DataDir,
    svc: Service,
    raft: RaftNode,
    store: RaftStore,
    initial: BTreeMap<NodeId, String>,
    peers: BTreeMap<NodeId, String>,
    genesis: Option<Genesis>,
    listeners: Listeners,
    rng: ChaCha20Rng,
    rx_tx: Option<(Sender<Event>, Receiver<Event>)>,
}

fn launch(l: Launch<'_>) -> Result<NodeHandle, NodeError> {
    let (tx, rx) = l.rx_tx.unwrap_or_else(mpsc::channel);
    let stop = Arc::new(AtomicBool::new(false));
    let node_address = l.listeners.node.local_addr()?;
    let rpc_address = l.listeners.rpc.local_addr()?;
    let listeners = vec![
        spawn_acceptor(l.listeners.node, stop.clone(), tx.clone(), serve_peer),
        spawn_acceptor(l.listeners.rpc, stop.clone(), tx.clone(), serve_rpc),
    ];
    let node_id = l.raft.id();
    let service_identity = l.svc.service_identity();
    let ledger_path = l.cfg.ledger_path().to_path_buf();
    let rt = Runtime {
        raft: l.raft,
        store: l.store,
        svc: l.svc,
        rng: l.rng,
        rx,
        links: BTreeMap::new(),
        peers: l.peers,
        initial: l.initial,
        pending: BTreeMap::new(),
        genesis: l.genesis,
        tick: 0,
        sign_inflight: None,
        last_sign_tick: 0,
    };
    let runtime = thread::Builder::new().name(format!("node-{node_id}")).spawn(move || rt.run())?;
    Ok(NodeHandle { node_id, node_address, rpc_address, service_identity, data_dir: l.dir.0, ledger_path, tx, stop, runtime: Some(runtime), listeners })
}

fn spawn_acceptor(
    listener: TcpListener,
    stop: Arc<AtomicBool>,
    tx: Sender<Event>,
    serve: fn(TcpStream, Sender<Event>),
) -> JoinHandle<()> {
    thread::spawn(move || {
        for conn in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(s) => {
                    let tx = tx.clone();
                    thread::spawn(move || serve(s, tx));
                }
                Err(e) => log::debug!("accept failed: {e}"),
            }
        }
    })
}

fn serve_peer(s: TcpStream, tx: Sender<Event>) {
    let mut r = BufReader::new(s);
    while let Ok(Some(frame)) = wire::read_frame(&mut r) {
        match wire::decode_message(&frame) {
            Some(m) => {
                if tx.send(Event::Peer(m)).is_err() {
                    break;
                }
            }
            None => {
                log::warn!("dropping undecodable peer frame");
                break;
            }
        }
    }
}

fn serve_rpc(s: TcpStream, tx: Sender<Event>) {
    let _ = s.set_nodelay(true);
    let Ok(read_half) = s.try_clone() else { return };
    let mut r = BufReader::new(read_half);
    let mut w = BufWriter::new(s);
    while let Ok(Some(frame)) = wire::read_frame(&mut r) {
        let resp = match wire::decode_request(&frame) {
            Ok(req) => {
                let (rtx, rrx) = mpsc::channel();
                if tx.send(Event::Client(req, rtx)).is_err() {
                    Response::error(503, "stopped", "node is shutting down")
                } else {
                    rrx.recv_timeout(CLIENT_WAIT)
                        .unwrap_or_else(|_| Response::error(504, "timeout", "request was not applied before the deadline"))
                }
            }
            Err(e) => Response::error(400, "malformed", e),
        };
        if wire::write_frame(&mut w, &wire::encode_response(&resp)).is_err() {
            break;
        }
    }
}

/// Outbound connection to one peer, fed through a bounded queue. Frames
/// are dropped when the peer is unreachable; consensus retransmits.
struct PeerLink {
    addr: String,
    tx: SyncSender<Vec<u8>>,
}

impl PeerLink {
    fn spawn(addr: String) -> Self {
        let (tx, rx) = mpsc::sync_channel::<Vec<u8>>(PEER_QUEUE);
        let target = addr.clone();
        thread::spawn(move || {
            let mut conn: Option<BufWriter<TcpStream>> = None;
            let mut retry_at = Instant::now();
            while let Ok(first) = rx.recv() {
                if conn.is_none() && Instant::now() >= retry_at {
                    let sock = target.parse::<SocketAddr>().ok().and_then(|a| TcpStream::connect_timeout(&a, Duration::from_millis(200)).ok());
                    match sock {
                        Some(s) => {
                            let _ = s.set_nodelay(true);
                            conn = Some(BufWriter::new(s));
                        }
                        None => retry_at = Instant::now() + Duration::from_millis(50),
                    }
                }
                let Some(w) = conn.as_mut() else { continue };
                let mut ok = write_raw(w, &first);
                while ok {
                    match rx.try_recv() {
                        Ok(b) => ok = write_raw(w, &b),
                        Err(_) => break,
                    }
                }
                if !ok || w.flush().is_err() {
                    conn = None;
                }
            }
        });
        PeerLink { addr, tx }
    }
}

fn write_raw(w: &mut impl Write, payload: &[u8]) -> bool {
    w.write_all(&(payload.len() as u32).to_le_bytes()).and_then(|_| w.write_all(payload)).is_ok()
}

enum Waiter {
    Request { term: u64, reply: Sender<Response> },
    Join { term: u64, join: JoinRequest, reply: Sender<Response> },
}

struct Runtime {
    raft: RaftNode,
    store: RaftStore,
    svc: Service,
    rng: ChaCha20Rng,
    rx: Receiver<Event>,
    links: BTreeMap<NodeId, PeerLink>,
    /// Addresses learned outside the log (from a join grant).
    peers: BTreeMap<NodeId, String>,
    initial: BTreeMap<NodeId, String>,
    pending: BTreeMap<u64, Waiter>,
    genesis: Option<Genesis>,
    tick: u64,
    sign_inflight: Option<u64>,
    last_sign_tick: u64,
}

enum Route {
    Write,
    Join,
    Status,
    Receipt(u64),
    Read,
}

const APP_WRITES: [&str; 7] =
    ["/app/mint", "/app/redeem", "/app/transfer", "/app/issue-claim", "/app/retire-claim", "/app/register-asset", "/app/dvp"];

fn route(path: &str) -> Route {
    if path == "/node/status" {
        return Route::Status;
    }
    if path == JOIN_PATH {
        return Route::Join;
    }
    if let Some(n) = path.strip_prefix("/node/receipt/") {
        return n.parse().map(Route::Receipt).unwrap_or(Route::Read);
    }
    let ballot = path.strip_prefix("/gov/proposals/").is_some_and(|r| r.ends_with("/ballots"));
    if path == PROPOSALS_PATH || ballot || APP_WRITES.contains(&path) {
        return Route::Write;
    }
    Route::Read
}

impl Runtime {
    fn run(mut self) -> Result<(), NodeError> {
        let res = self.run_loop();
        match res {
            Ok(true) => {
                self.svc.crash();
                Ok(())
            }
            Ok(false) => Ok(self.svc.flush()?),
            Err(e) => {
                log::error!("node {} stopping: {e}", self.raft.id());
                let _ = self.svc.flush();
                Err(e)
            }
        }
    }

    /// Returns whether the stop was a simulated crash.
    fn run_loop(&mut self) -> Result<bool, NodeError> {
        let mut next_tick = Instant::now() + TICK;
        loop {
            let mut out = Vec::new();
            let wait = next_tick.saturating_duration_since(Instant::now());
            let mut events = Vec::new();
            match self.rx.recv_timeout(wait) {
                Ok(ev) => events.push(ev),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Ok(false),
            }
            while events.len() < 4096 {
                match self.rx.try_recv() {
                    Ok(ev) => events.push(ev),
                    Err(_) => break,
                }
            }
            for ev in events {
                match ev {
                    Event::Stop { crash } => return Ok(crash),
                    Event::Peer(m) => out.extend(self.raft.handle(m)),
                    Event::Client(req, reply) => self.on_client(req, reply),
                }
            }
            let now = Instant::now();
            if now >= next_tick {
                self.tick += 1;
                next_tick = if now > next_tick + TICK * 5 { now + TICK } else { next_tick + TICK };
                out.extend(self.raft.tick(self.tick));
                self.on_tick();
            }
            self.pump(out)?;
            self.apply_committed()?;
        }
    }

    /// Persists consensus state, then sends messages.
    fn pump(&mut self, mut out: Vec<Message>) -> Result<(), NodeError> {
        out.extend(self.raft.replicate());
        if let Some(d) = self.raft.take_persist() {
            self.store.persist(&d)?;
        }
        for m in out {
            let Some(addr) = self.address_of(m.to) else {
                log::debug!("no address for node {}", m.to);
                continue;
            };
            let link = self.links.entry(m.to).or_insert_with(|| PeerLink::spawn(addr.clone()));
            if link.addr != addr {
                *link = PeerLink::spawn(addr);
            }
            match link.tx.try_send(wire::encode_message(&m)) {
                Ok(()) | Err(TrySendError::Full(_)) => {}
                Err(TrySendError::Disconnected(_)) => {
                    self.links.remove(&m.to);
                }
            }
        }
        Ok(())
    }

    fn address_of(&self, id: NodeId) -> Option<String> {
        if let Some(ctx) = self.raft.voters().get(&id) {
            return String::from_utf8(ctx.clone()).ok();
        }
        self.peers.get(&id).cloned()
    }

    fn on_tick(&mut self) {
        if !self.raft.is_leader() {
            return;
        }
        if self.svc.gov().is_none() {
            if let Some(g) = self.genesis.take() {
                let bytes = ServiceCommand::Genesis { genesis: g }.encode(None, &mut self.rng);
                let _ = self.raft.propose(EntryPayload::Command(bytes));
            }
            return;
        }
        let applied = self.svc.applied_index();
        if self.sign_inflight.is_some_and(|i| i <= applied || i > self.raft.last_index()) {
            self.sign_inflight = None;
        }
        if self.sign_inflight.is_none() && self.svc.ledger().unsigned_count() > 0 && self.tick >= self.last_sign_tick + SIGN_EVERY_TICKS {
            let bytes = ServiceCommand::Sign.encode(None, &mut self.rng);
            if let Ok(i) = self.raft.propose(EntryPayload::Command(bytes)) {
                self.sign_inflight = Some(i);
                self.last_sign_tick = self.tick;
            }
        }
    }

    fn redirect(&self) -> Response {
        let leader = self.raft.leader_hint().filter(|l| *l != self.raft.id());
        let rpc = leader.and_then(|l| self.svc.gov().and_then(|g| g.nodes.get(&l)).map(|n| n.rpc_address.clone()));
        let mut r = Response::error(REDIRECT, "not_leader", "this node is not the leader");
        r.body["leader"] = json!(leader);
        r.body["leader_rpc"] = json!(rpc);
        r
    }

    fn on_client(&mut self, req: SignedRequest, reply: Sender<Response>) {
        match route(&req.path) {
            Route::Status => {
                let _ = reply.send(Response::ok(self.status()));
            }
            Route::Read => {
                let _ = reply.send(self.svc.query(&req));
            }
            Route::Receipt(seqno) => {
                let _ = reply.send(self.receipt(seqno));
            }
            Route::Write => {
                if !self.raft.is_leader() {
                    let _ = reply.send(self.redirect());
                    return;
                }
                let key = self.svc.confidential().then(|| self.svc.secrets().data_key.clone());
                let bytes = ServiceCommand::Request { request: req }.encode(key.as_ref(), &mut self.rng);
                match self.raft.propose(EntryPayload::Command(bytes)) {
                    Ok(i) => {
                        self.pending.insert(i, Waiter::Request { term: self.raft.term(), reply });
                    }
                    Err(_) => {
                        let _ = reply.send(self.redirect());
                    }
                }
            }
            Route::Join => {
                let join: JoinRequest = match serde_json::from_value(req.body.clone()) {
                    Ok(j) => j,
                    Err(e) => {
                        let _ = reply.send(Response::error(400, "malformed", e));
                        return;
                    }
                };
                if req.signer_id != format!("node:{}", join.node_id()) || !req.verify(&join.node_identity) {
                    let _ = reply.send(Response::error(401, "authentication", "join request must be signed by the joining node"));
                    return;
                }
                if !self.raft.is_leader() {
                    let _ = reply.send(self.redirect());
                    return;
                }
                let bytes = ServiceCommand::Join { join: join.clone() }.encode(None, &mut self.rng);
                match self.raft.propose(EntryPayload::Command(bytes)) {
                    Ok(i) => {
                        self.pending.insert(i, Waiter::Join { term: self.raft.term(), join, reply });
                    }
                    Err(_) => {
                        let _ = reply.send(self.redirect());
                    }
                }
            }
        }
    }

    fn status(&self) -> serde_json::Value {
        let gov = self.svc.gov();
        json!({
            "node_id": self.raft.id(),
            "role": self.raft.role(),
            "term": self.raft.term(),
            "leader": self.raft.leader_hint(),
            "commit_index": self.raft.commit_index(),
            "applied_index": self.svc.applied_index(),
            "ledger_entries": self.svc.ledger().len(),
            "ledger_bytes": self.svc.ledger().byte_len(),
            "voters": self.raft.voters().keys().collect::<Vec<_>>(),
            "phase": gov.map(|g| g.service.phase),
            "confidential_mode": gov.map(|g| g.service.confidential_mode),
            "service_identity": self.svc.service_identity(),
        })
    }

    fn receipt(&self, seqno: u64) -> Response {
        match self.svc.receipt(seqno) {
            Ok(r) => {
                let mut resp = Response::ok(json!({
                    "seqno": r.seqno,
                    "receipt": hex::encode(r.to_bytes()),
                    "root": r.root,
                    "service_identity": r.service_identity,
                }));
                resp.seqno = Some(seqno);
                resp
            }
            Err(LedgerError::NotYetSigned(_)) => Response::error(409, "not_yet_signed", format!("entry {seqno} is not covered by a signature yet")),
            Err(LedgerError::NotFound(_)) => Response::error(404, "not_found", format!("no entry {seqno}")),
            Err(e) => Response::error(500, "ledger", e),
        }
    }

    fn grant(&mut self, join: &JoinRequest) -> Response {
        let Some(key) = hex::decode(&join.exchange_key).ok().and_then(|k| <[u8; 32]>::try_from(k).ok()) else {
            return Response::error(400, "malformed", "exchange_key must be 32 hex bytes");
        };
        let wrapped = wrap_secret(&key, &self.svc.secrets().to_bytes(), &mut self.rng);
        let mut peers: BTreeMap<NodeId, String> = self.raft.voters().iter().filter_map(|(k, v)| Some((*k, String::from_utf8(v.clone()).ok()?))).collect();
        peers.extend(self.peers.iter().map(|(k, v)| (*k, v.clone())));
        let grant = JoinGrant {
            node_id: join.node_id(),
            initial_voters: self.initial.clone(),
            peers,
            service_identity: self.svc.service_identity(),
            wrapped_secrets: wrapped,
        };
        Response::ok(serde_json::to_value(grant).expect("serializes"))
    }

    fn apply_committed(&mut self) -> Result<(), NodeError> {
        let committed = self.raft.take_committed();
        if committed.is_empty() {
            return Ok(());
        }
        let mut replies: Vec<(Sender<Response>, Response)> = Vec::new();
        for (index, rec) in committed {
            let waiter = self.pending.remove(&index);
            let stale = |w: &Waiter| match w {
                Waiter::Request { term, .. } | Waiter::Join { term, .. } => *term != rec.term,
            };
            if let Some(w) = waiter.as_ref().filter(|w| stale(w)) {
                let reply = match w {
                    Waiter::Request { reply, .. } | Waiter::Join { reply, .. } => reply.clone(),
                };
                replies.push((reply, Response::error(503, "superseded", "leadership changed before the request committed; it was not applied")));
            }
            let waiter = waiter.filter(|w| !stale(w));
            match rec.payload {
                EntryPayload::Command(bytes) => {
                    let applied = self.svc.apply(index, &bytes)?;
                    match (waiter, applied.event) {
                        (Some(Waiter::Request { reply, .. }), _) => replies.push((reply, applied.response)),
                        (Some(Waiter::Join { join, reply, .. }), Some(ServiceEvent::NodeAdmitted { .. })) => {
                            // The grant goes out as soon as the voter change is
                            // proposed: with the configuration taking effect on
                            // append, the change cannot commit until the joiner
                            // is running and acknowledges it.
                            let id = join.node_id();
                            let ok = self.raft.voters().contains_key(&id)
                                || self.raft.propose(EntryPayload::AddNode { id, context: join.node_address.as_bytes().to_vec() }).is_ok();
                            let r = if ok { self.grant(&join) } else { self.redirect() };
                            replies.push((reply, r));
                        }
                        (Some(Waiter::Join { reply, .. }), _) => replies.push((reply, applied.response)),
                        (None, _) => {}
                    }
                }
                EntryPayload::AddNode { id, .. } => {
                    log::info!("node {} added voter {id} at index {index}", self.raft.id());
                }
                EntryPayload::Noop | EntryPayload::RemoveNode { .. } => {}
            }
        }
        self.svc.flush()?;
        for (tx, r) in replies {
            let _ = tx.send(r);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes() {
        assert!(matches!(route("/gov/proposals"), Route::Write));
        assert!(matches!(route("/gov/proposals/3/ballots"), Route::Write));
        assert!(matches!(route("/gov/proposals/3"), Route::Read));
        assert!(matches!(route("/app/dvp"), Route::Write));
        assert!(matches!(route("/app/balance"), Route::Read));
        assert!(matches!(route("/node/receipt/12"), Route::Receipt(12)));
        assert!(matches!(route("/node/join"), Route::Join));
    }
}
