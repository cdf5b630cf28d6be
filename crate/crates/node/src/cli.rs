//! Operator CLI.
//!
//! Every command prints one JSON document on stdout. Failures print
//! `{"error": code, "message": ...}` (plus command-specific fields) and exit
//! with status 1; usage errors exit with status 2.

use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use conledger_core::codec::Canonical;
use conledger_core::crypto::KeyPair;
use conledger_core::enclave::{measure, Platform};
use conledger_core::governance::{ballot_path, Action, Ballot, PROPOSALS_PATH};
use conledger_core::ledger::audit::{verify_chain, ChainError, ChainStatus};
use conledger_core::ledger::receipt::{verify_receipt, Receipt};
use conledger_core::service::{Response, SignedRequest};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};

use crate::bench;
use crate::client::Client;
use crate::config::{ConfigError, NodeConfig};
use crate::runtime::{join_node, restart_node, start_node, NodeError, NodeHandle};
use crate::storage;

#[derive(Parser, Debug)]
#[command(name = "conledger", version, about = "Confidential consortium ledger node and tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run or inspect a node.
    #[command(subcommand)]
    Node(NodeCmd),
    /// Member governance.
    #[command(subcommand)]
    Gov(GovCmd),
    /// Settlement application requests.
    App(AppArgs),
    /// Offline verification.
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Generate a signing key (or an emulated platform with --platform).
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// Write an emulated attestation platform with this id instead.
        #[arg(long)]
        platform: Option<String>,
    },
    #[command(subcommand)]
    Enclave(EnclaveCmd),
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand, Debug)]
pub enum NodeCmd {
    /// Start the first node of a new service.
    Start {
        #[arg(long)]
        config: PathBuf,
    },
    /// Join an existing service.
    Join {
        #[arg(long)]
        config: PathBuf,
    },
    /// Restart a node from its data directory and ledger.
    Restart {
        #[arg(long)]
        config: PathBuf,
    },
    Status {
        #[arg(long)]
        rpc: String,
    },
    /// Fetch the receipt for a committed entry.
    Receipt {
        #[arg(long)]
        rpc: String,
        #[arg(long)]
        seqno: u64,
        #[arg(long)]
        out: PathBuf,
        /// How long to wait for a signature to cover the entry.
        #[arg(long, default_value_t = 10_000)]
        wait_ms: u64,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Signer {
    #[arg(long)]
    pub rpc: String,
    #[arg(long)]
    pub member: String,
    /// File holding the member's hex secret key.
    #[arg(long)]
    pub key: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum GovCmd {
    Propose {
        #[command(flatten)]
        signer: Signer,
        /// Action JSON, or @file.
        #[arg(long)]
        action: String,
    },
    Vote {
        #[command(flatten)]
        signer: Signer,
        #[arg(long)]
        proposal: u64,
        #[arg(long, value_enum)]
        ballot: BallotArg,
    },
    /// Service state, or one proposal.
    Status {
        #[arg(long)]
        rpc: String,
        #[arg(long)]
        proposal: Option<u64>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum BallotArg {
    Yes,
    No,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppOp {
    Mint,
    Redeem,
    Transfer,
    IssueClaim,
    RetireClaim,
    RegisterAsset,
    Dvp,
    Balance,
    Asset,
    Tx,
}

impl AppOp {
    fn path(self, seqno: Option<u64>) -> anyhow::Result<String> {
        Ok(match self {
            AppOp::Mint => "/app/mint".into(),
            AppOp::Redeem => "/app/redeem".into(),
            AppOp::Transfer => "/app/transfer".into(),
            AppOp::IssueClaim => "/app/issue-claim".into(),
            AppOp::RetireClaim => "/app/retire-claim".into(),
            AppOp::RegisterAsset => "/app/register-asset".into(),
            AppOp::Dvp => "/app/dvp".into(),
            AppOp::Balance => "/app/balance".into(),
            AppOp::Asset => "/app/asset".into(),
            AppOp::Tx => format!("/app/tx/{}", seqno.ok_or_else(|| anyhow!("`app tx` needs --seqno"))?),
        })
    }
}

#[derive(Args, Debug)]
pub struct AppArgs {
    #[arg(value_enum)]
    pub op: AppOp,
    #[arg(long)]
    pub rpc: String,
    #[arg(long)]
    pub party: String,
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long, requires = "cosigner_key")]
    pub cosigner: Option<String>,
    #[arg(long)]
    pub cosigner_key: Option<PathBuf>,
    /// Request body JSON, or @file.
    #[arg(long, default_value = "{}")]
    pub body: String,
    #[arg(long)]
    pub seqno: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum AuditCmd {
    /// Recompute every digest and signed root of a ledger file.
    VerifyChain {
        ledger: PathBuf,
        #[arg(long)]
        service_key: PathBuf,
    },
    /// Verify a receipt file against the service identity.
    VerifyReceipt {
        receipt: PathBuf,
        #[arg(long)]
        service_key: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum EnclaveCmd {
    /// Print the measurement of a code blob.
    Measure {
        #[arg(long)]
        code_blob: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum BenchCmd {
    /// Run a scenario file and write report.csv, report.json, scaling.csv
    /// and probes.json into the output directory.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// An error that already carries its JSON report.
#[derive(Debug)]
struct Reported(Value);

impl std::fmt::Display for Reported {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for Reported {}

fn reported(code: &str, message: impl std::fmt::Display, extra: Value) -> anyhow::Error {
    let mut v = json!({ "error": code, "message": message.to_string() });
    if let (Some(o), Value::Object(e)) = (v.as_object_mut(), extra) {
        o.extend(e);
    }
    Reported(v).into()
}

/// Runs the CLI and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(e) => {
            let v = if let Some(r) = e.downcast_ref::<Reported>() {
                r.0.clone()
            } else if let Some(n) = e.downcast_ref::<NodeError>() {
                let mut v = json!({ "error": n.code(), "message": format!("{e:#}") });
                if let NodeError::JoinDenied { reason } = n {
                    v["reason"] = json!(reason);
                }
                v
            } else {
                let code = if e.is::<ConfigError>() {
                    "config"
                } else if e.is::<storage::StorageError>() {
                    "storage"
                } else if e.is::<bench::BenchError>() {
                    "bench"
                } else {
                    "failed"
                };
                json!({ "error": code, "message": format!("{e:#}") })
            };
            println!("{v}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<Value> {
    match cmd {
        Command::Node(c) => node(c),
        Command::Gov(c) => gov(c),
        Command::App(a) => app(a),
        Command::Audit(c) => audit(c),
        Command::Keygen { out, platform } => keygen(&out, platform),
        Command::Enclave(EnclaveCmd::Measure { code_blob }) => {
            let blob = std::fs::read(&code_blob).with_context(|| format!("reading {}", code_blob.display()))?;
            Ok(json!({ "measurement": measure(&blob) }))
        }
        Command::Bench(BenchCmd::Run { scenario, out }) => {
            let text = std::fs::read_to_string(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let list = bench::parse_scenarios(&text)?;
            let work = out.join("work");
            let suite = bench::run_suite(&list, &work)?;
            bench::write_reports(&suite, &out)?;
            let _ = std::fs::remove_dir_all(&work);
            Ok(json!({ "out": out, "rows": suite.rows }))
        }
    }
}

fn run_node(h: NodeHandle) -> anyhow::Result<Value> {
    println!("{}", h.describe());
    h.wait()?;
    Ok(json!({ "stopped": true }))
}

fn node(c: NodeCmd) -> anyhow::Result<Value> {
    match c {
        NodeCmd::Start { config } => run_node(start_node(&NodeConfig::load(&config)?)?),
        NodeCmd::Join { config } => run_node(join_node(&NodeConfig::load(&config)?)?),
        NodeCmd::Restart { config } => run_node(restart_node(&NodeConfig::load(&config)?)?),
        NodeCmd::Status { rpc } => ok_body(call(&rpc, &SignedRequest::anonymous("/node/status", json!({})))?),
        NodeCmd::Receipt { rpc, seqno, out, wait_ms } => {
            let mut client = Client::new(rpc.as_str());
            let t = Instant::now();
            let resp = loop {
                let r = client.call_with_retry(&SignedRequest::anonymous(format!("/node/receipt/{seqno}"), json!({})), 5)?;
                if r.status != 409 || t.elapsed() >= Duration::from_millis(wait_ms) {
                    break r;
                }
                thread::sleep(Duration::from_millis(25));
            };
            let body = ok_body(resp)?;
            let bytes = body["receipt"].as_str().and_then(|h| hex::decode(h).ok()).ok_or_else(|| anyhow!("node sent a malformed receipt"))?;
            std::fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            Ok(json!({ "seqno": seqno, "out": out, "root": body["root"], "bytes": bytes.len() }))
        }
    }
}

fn call(rpc: &str, req: &SignedRequest) -> anyhow::Result<Response> {
    Client::new(rpc).call_with_retry(req, 5).map_err(|e| reported("unreachable", format!("{rpc}: {e}"), json!({})))
}

/// The body of a successful response, or the response as a JSON error.
fn ok_body(r: Response) -> anyhow::Result<Value> {
    if r.is_ok() {
        let mut body = r.body;
        if let (Some(s), Some(o)) = (r.seqno, body.as_object_mut()) {
            o.entry("seqno").or_insert(json!(s));
        }
        return Ok(body);
    }
    let code = r.body["error"].as_str().unwrap_or("request_failed").to_string();
    let message = r.body["message"].as_str().unwrap_or_default().to_string();
    let mut extra = r.body.clone();
    extra["status"] = json!(r.status);
    Err(reported(&code, message, extra))
}

/// Literal JSON, or `@path` to read it from a file.
fn json_arg(s: &str) -> anyhow::Result<Value> {
    let text = match s.strip_prefix('@') {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {p}"))?,
        None => s.to_string(),
    };
    serde_json::from_str(&text).map_err(|e| reported("malformed", format!("invalid JSON argument: {e}"), json!({})))
}

fn gov(c: GovCmd) -> anyhow::Result<Value> {
    match c {
        GovCmd::Propose { signer, action } => {
            let action: Action = serde_json::from_value(json_arg(&action)?).map_err(|e| reported("malformed", format!("invalid action: {e}"), json!({})))?;
            let key = storage::load_key(&signer.key)?;
            let req = SignedRequest::sign(PROPOSALS_PATH, json!({ "action": action }), signer.member.as_str(), &key);
            ok_body(call(&signer.rpc, &req)?)
        }
        GovCmd::Vote { signer, proposal, ballot } => {
            let key = storage::load_key(&signer.key)?;
            let ballot = match ballot {
                BallotArg::Yes => Ballot::Yes,
                BallotArg::No => Ballot::No,
            };
            let req = SignedRequest::sign(ballot_path(proposal), json!({ "ballot": ballot }), signer.member.as_str(), &key);
            ok_body(call(&signer.rpc, &req)?)
        }
        GovCmd::Status { rpc, proposal } => {
            let path = match proposal {
                Some(p) => format!("/gov/proposals/{p}"),
                None => "/gov/service".into(),
            };
            ok_body(call(&rpc, &SignedRequest::anonymous(path, json!({})))?)
        }
    }
}

fn app(a: AppArgs) -> anyhow::Result<Value> {
    let path = a.op.path(a.seqno)?;
    let key = storage::load_key(&a.key)?;
    let mut req = SignedRequest::sign(path, json_arg(&a.body)?, a.party.as_str(), &key);
    if let (Some(id), Some(k)) = (&a.cosigner, &a.cosigner_key) {
        req = req.cosign(id.as_str(), &storage::load_key(k)?);
    }
    ok_body(call(&a.rpc, &req)?)
}

fn audit(c: AuditCmd) -> anyhow::Result<Value> {
    match c {
        AuditCmd::VerifyChain { ledger, service_key } => {
            let key = storage::load_public_key(&service_key)?;
            match verify_chain(&ledger, &key) {
                Ok(ChainStatus::Ok { entries, unsigned_tail }) => Ok(json!({ "ok": true, "entries": entries, "unsigned_tail": unsigned_tail })),
                Ok(ChainStatus::FirstBadSeqno(s)) => {
                    Err(reported("tampered", format!("entry {s} does not match the signed chain"), json!({ "first_bad_seqno": s })))
                }
                Err(ChainError::Truncated { offset, last_good }) => Err(reported(
                    "truncated",
                    format!("ledger ends inside a frame at byte {offset}"),
                    json!({ "offset": offset, "last_good": last_good }),
                )),
                Err(e) => Err(reported("io", e, json!({}))),
            }
        }
        AuditCmd::VerifyReceipt { receipt, service_key } => {
            let key = storage::load_public_key(&service_key)?;
            let bytes = std::fs::read(&receipt).with_context(|| format!("reading {}", receipt.display()))?;
            let r = Receipt::from_bytes(&bytes).map_err(|e| reported("malformed", format!("receipt does not decode: {e}"), json!({})))?;
            if r.service_identity != key {
                bail!(reported("wrong_service", "receipt names a different service identity", json!({ "seqno": r.seqno })));
            }
            if !verify_receipt(&r, &key) {
                bail!(reported("invalid_receipt", "proof path or root signature does not verify", json!({ "seqno": r.seqno })));
            }
            Ok(json!({ "ok": true, "seqno": r.seqno, "root": r.root, "entry_digest": r.entry_digest }))
        }
    }
}

fn keygen(out: &Path, platform: Option<String>) -> anyhow::Result<Value> {
    let mut rng = ChaCha20Rng::from_entropy();
    if let Some(id) = platform {
        let p = Platform::generate(id.as_str(), &mut rng);
        storage::save_platform(out, &p)?;
        return Ok(json!({ "platform_id": id, "public_key": p.public_key(), "out": out }));
    }
    let k = KeyPair::generate(&mut rng);
    storage::save_key(out, &k)?;
    let pub_path = PathBuf::from(format!("{}.pub", out.display()));
    storage::write_atomic(&pub_path, k.public().to_hex().as_bytes())?;
    Ok(json!({ "public_key": k.public(), "out": out, "public_out": pub_path }))
}
