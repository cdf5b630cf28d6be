//! The committed-command applier.
//!
//! Consensus orders opaque command bytes; this module decodes each committed
//! command, executes it against governance and settlement state, and writes
//! the resulting ledger entries. All replicas apply the same commands in the
//! same order, so their ledgers are byte-identical.
//!
//! # Ledger payload envelope
//!
//! Every Governance and App entry payload (after decryption) is
//!
//! ```text
//! u64 command_index (LE) || u8 last_in_command || body
//! ```
//!
//! `command_index` is the consensus log index of the command that produced
//! the entry and `last_in_command` marks the final entry of that command's
//! group. Governance bodies are [`GovRecord`] JSON; App bodies are
//! [`AppRecord`] JSON. Signature entries carry no envelope and are only
//! written between groups, once at least ten entries are unsigned or when a
//! `Sign` command is applied.
//!
//! On reopen, a trailing incomplete group is cut off and every remaining
//! group is re-executed and compared with what the ledger holds, so the
//! in-memory state is a pure function of the ledger.

use std::fmt;
use std::path::Path;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::codec::request_signing_bytes;
use crate::crypto::{random_nonce, KeyPair, PublicKey, Signature, SymmetricKey, NONCE_LEN};
use crate::enclave::AttestationQuote;
use crate::governance::{
    Action, Ballot, Effect, GovError, GovRecord, GovState, Genesis, JoinDecision, NodeInfo, Phase, PROPOSALS_PATH,
};
use crate::ledger::{decrypt_payload, EntryKind, Ledger, LedgerConfig, LedgerError, Privacy, Receipt};
use crate::settlement::{AppCommand, AppPolicy, DvpStage, Interrupted, PartyRole, SettlementError, SettlementState};

/// Ten entries between automatic signatures.
pub const SIGNATURE_INTERVAL: u64 = 10;
const ENVELOPE_LEN: usize = 9;
const COMMAND_AAD: &[u8] = b"conledger/command/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedRequest {
    pub path: String,
    pub body: Value,
    /// Empty for anonymous reads.
    pub signer_id: String,
    pub signature: Signature,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosigner_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosignature: Option<Signature>,
}

impl SignedRequest {
    pub fn sign(path: impl Into<String>, body: Value, signer_id: impl Into<String>, key: &KeyPair) -> Self {
        let path = path.into();
        let signer_id = signer_id.into();
        let signature = key.sign(&request_signing_bytes(&signer_id, &path, &body));
        SignedRequest { path, body, signer_id, signature, cosigner_id: None, cosignature: None }
    }

    pub fn anonymous(path: impl Into<String>, body: Value) -> Self {
        SignedRequest { path: path.into(), body, signer_id: String::new(), signature: Signature([0; 64]), cosigner_id: None, cosignature: None }
    }

    /// Adds a co-signature over the same path and body.
    pub fn cosign(mut self, cosigner_id: impl Into<String>, key: &KeyPair) -> Self {
        let id = cosigner_id.into();
        self.cosignature = Some(key.sign(&request_signing_bytes(&id, &self.path, &self.body)));
        self.cosigner_id = Some(id);
        self
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(&request_signing_bytes(&self.signer_id, &self.path, &self.body), &self.signature).is_ok()
    }

    pub fn verify_cosigner(&self, key: &PublicKey) -> bool {
        match (&self.cosigner_id, &self.cosignature) {
            (Some(id), Some(sig)) => key.verify(&request_signing_bytes(id, &self.path, &self.body), sig).is_ok(),
            _ => false,
        }
    }

    pub fn is_private(&self) -> bool {
        self.body.get("privacy").and_then(Value::as_str) == Some("private")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinRequest {
    pub node_identity: PublicKey,
    pub node_address: String,
    pub rpc_address: String,
    pub quote: Option<AttestationQuote>,
    /// Hex X25519 public key the service secrets are wrapped to.
    pub exchange_key: String,
}

impl JoinRequest {
    pub fn node_id(&self) -> u64 {
        self.node_identity.fingerprint()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum ServiceCommand {
    Genesis { genesis: Genesis },
    Request { request: SignedRequest },
    /// A `Request` sealed under the data key for the consensus log.
    Private { nonce: String, ciphertext: String },
    Join { join: JoinRequest },
    RetireNode { node_id: u64 },
    Sign,
}

impl ServiceCommand {
    /// Bytes for the consensus log. Private requests are sealed when a data
    /// key is given, so no persisted log holds their plaintext.
    pub fn encode<R: RngCore + CryptoRng>(&self, data_key: Option<&SymmetricKey>, rng: &mut R) -> Vec<u8> {
        if let (ServiceCommand::Request { request }, Some(key)) = (self, data_key) {
            if request.is_private() {
                let nonce = random_nonce(rng);
                let plain = serde_json::to_vec(self).expect("commands serialize");
                let ct = key.encrypt(&nonce, COMMAND_AAD, &plain);
                let sealed = ServiceCommand::Private { nonce: hex::encode(nonce), ciphertext: hex::encode(ct) };
                return serde_json::to_vec(&sealed).expect("commands serialize");
            }
        }
        serde_json::to_vec(self).expect("commands serialize")
    }

    pub fn decode(bytes: &[u8], data_key: &SymmetricKey) -> Result<Self, String> {
        let cmd: ServiceCommand = serde_json::from_slice(bytes).map_err(|e| format!("malformed command: {e}"))?;
        let ServiceCommand::Private { nonce, ciphertext } = &cmd else {
            return Ok(cmd);
        };
        let nonce: [u8; NONCE_LEN] = hex::decode(nonce).ok().and_then(|n| n.try_into().ok()).ok_or("bad nonce")?;
        let ct = hex::decode(ciphertext).map_err(|_| "bad ciphertext")?;
        let plain = data_key.decrypt(&nonce, COMMAND_AAD, &ct).map_err(|_| "sealed command failed authentication")?;
        match serde_json::from_slice(&plain).map_err(|e| e.to_string())? {
            inner @ ServiceCommand::Request { .. } => Ok(inner),
            _ => Err("sealed command is not a request".into()),
        }
    }
}

/// Body of an App ledger entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppRecord {
    pub request: SignedRequest,
    pub result: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub status: u16,
    pub body: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seqno: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receipt_hint: Option<String>,
}

impl Response {
    pub fn ok(body: Value) -> Self {
        Response { status: 200, body, seqno: None, receipt_hint: None }
    }

    pub fn error(status: u16, code: &str, message: impl fmt::Display) -> Self {
        Response { status, body: json!({ "error": code, "message": message.to_string() }), seqno: None, receipt_hint: None }
    }

    pub fn is_ok(&self) -> bool {
        self.status == 200
    }
}

fn gov_response(e: GovError) -> Response {
    match &e {
        GovError::Unauthorized(_) => Response::error(403, "unauthorized", &e),
        GovError::Authentication => Response::error(401, "authentication", &e),
        GovError::Validation { rule } => {
            let mut r = Response::error(400, "validation", &e);
            r.body["rule"] = json!(rule);
            r
        }
        GovError::NotFound(_) => Response::error(404, "not_found", &e),
        GovError::State { .. } => Response::error(409, "state", &e),
        GovError::Genesis(_) => Response::error(400, "genesis", &e),
    }
}

fn settlement_response(e: SettlementError) -> Response {
    let code = match &e {
        SettlementError::Unauthorized(_) => return Response::error(403, "unauthorized", &e),
        SettlementError::Validation(_) | SettlementError::Policy(_) => return Response::error(400, "validation", &e),
        SettlementError::NotFound(_) => return Response::error(404, "not_found", &e),
        SettlementError::InsufficientFunds { .. } => "insufficient_funds",
        SettlementError::BackingViolation { .. } => "backing_violation",
        SettlementError::InsufficientAsset { .. } => "insufficient_asset",
        SettlementError::InsufficientClaim { .. } => "insufficient_claim",
        SettlementError::Duplicate(_) => "duplicate",
    };
    Response::error(409, code, &e)
}

/// Crash injection points for recovery testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailPoint {
    DvpValidated,
    DvpAssetLegApplied,
    DvpCashLegApplied,
    /// After the first entry of a multi-entry group is appended.
    MidGroup,
    /// After the whole group is appended but before anything is flushed.
    BeforeFlush,
    /// After the group is flushed to the file.
    AfterFlush,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("crash injected at {0:?}")]
    Crashed(FailPoint),
    #[error("ledger replay diverged at seqno {seqno}: {reason}")]
    Replay { seqno: u64, reason: String },
}

/// Keys every replica holds inside its enclave.
#[derive(Clone)]
pub struct ServiceSecrets {
    pub signing_key: KeyPair,
    pub data_key: SymmetricKey,
}

impl ServiceSecrets {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        ServiceSecrets { signing_key: KeyPair::generate(rng), data_key: SymmetricKey::generate(rng) }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        [self.signing_key.seed(), self.data_key.0].concat()
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != 64 {
            return None;
        }
        Some(ServiceSecrets {
            signing_key: KeyPair::from_seed(b[..32].try_into().ok()?),
            data_key: SymmetricKey(b[32..].try_into().ok()?),
        })
    }
}

impl fmt::Debug for ServiceSecrets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ServiceSecrets(identity={:?})", self.signing_key.public())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    kind: EntryKind,
    privacy: Privacy,
    body: Vec<u8>,
}

enum Op {
    Genesis(Genesis),
    Request(SignedRequest),
    Join(JoinRequest),
    /// A node admission read back from the ledger.
    Admit(NodeInfo),
    RetireNode(u64),
}

/// Side effects the node runtime acts on.
#[derive(Debug, Clone, PartialEq)]
pub enum ServiceEvent {
    NodeAdmitted { join: JoinRequest },
    NodeDenied { node_id: u64, reason: String },
    NodeRetired { node_id: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub response: Response,
    pub event: Option<ServiceEvent>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryInfo {
    pub entries: u64,
    pub discarded_bytes: u64,
    /// Entries of an incomplete trailing command group that were cut off.
    pub truncated_entries: u64,
    pub applied_index: u64,
}

fn envelope(index: u64, last: bool, body: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(ENVELOPE_LEN + body.len());
    v.extend_from_slice(&index.to_le_bytes());
    v.push(last as u8);
    v.extend_from_slice(body);
    v
}

/// Splits an entry payload into (command index, last-in-command, body).
pub fn open_envelope(p: &[u8]) -> Option<(u64, bool, &[u8])> {
    if p.len() < ENVELOPE_LEN || p[8] > 1 {
        return None;
    }
    Some((u64::from_le_bytes(p[..8].try_into().ok()?), p[8] == 1, &p[ENVELOPE_LEN..]))
}

pub struct Service {
    ledger: Ledger,
    secrets: ServiceSecrets,
    gov: Option<GovState>,
    app: Option<SettlementState>,
    applied_index: u64,
    fail: Option<(u64, FailPoint)>,
}

impl fmt::Debug for Service {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Service").field("entries", &self.ledger.len()).field("applied_index", &self.applied_index).finish()
    }
}

fn ledger_config() -> LedgerConfig {
    LedgerConfig { signature_interval: SIGNATURE_INTERVAL, auto_sign: false }
}

impl Service {
    /// A fresh service writing a new ledger file (or in memory when `path`
    /// is `None`).
    pub fn create(path: Option<&Path>, secrets: ServiceSecrets) -> Result<Self, ServiceError> {
        let mut ledger = match path {
            Some(p) => Ledger::create(p, ledger_config())?,
            None => Ledger::in_memory(ledger_config()),
        };
        ledger.set_signer(secrets.signing_key.clone());
        Ok(Service { ledger, secrets, gov: None, app: None, applied_index: 0, fail: None })
    }

    /// Reopens a ledger file and rebuilds all state by replaying it.
    pub fn open(path: &Path, secrets: ServiceSecrets) -> Result<(Self, RecoveryInfo), ServiceError> {
        let (mut ledger, report) = Ledger::open(path, ledger_config())?;
        ledger.set_signer(secrets.signing_key.clone());
        let complete = complete_prefix(&ledger, &secrets.data_key)?;
        let truncated = ledger.len() - complete;
        if truncated > 0 {
            log::warn!("cutting {truncated} entries of an incomplete command group");
            ledger.truncate(complete)?;
        }
        let mut svc = Service { ledger: Ledger::in_memory(ledger_config()), secrets, gov: None, app: None, applied_index: 0, fail: None };
        svc.replay_from(&ledger)?;
        svc.ledger = ledger;
        // a crash can land between a group and its due signature
        svc.ledger.sign_if_due()?;
        svc.ledger.flush()?;
        let info = RecoveryInfo {
            entries: svc.ledger.len(),
            discarded_bytes: report.discarded_bytes,
            truncated_entries: truncated,
            applied_index: svc.applied_index,
        };
        Ok((svc, info))
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn gov(&self) -> Option<&GovState> {
        self.gov.as_ref()
    }

    pub fn app(&self) -> Option<&SettlementState> {
        self.app.as_ref()
    }

    pub fn secrets(&self) -> &ServiceSecrets {
        &self.secrets
    }

    pub fn service_identity(&self) -> PublicKey {
        self.secrets.signing_key.public()
    }

    pub fn applied_index(&self) -> u64 {
        self.applied_index
    }

    pub fn confidential(&self) -> bool {
        self.gov.as_ref().is_some_and(|g| g.service.confidential_mode)
    }

    /// Governance and settlement state as one JSON value.
    pub fn state_json(&self) -> Value {
        json!({ "governance": self.gov, "settlement": self.app })
    }

    pub fn set_fail_point(&mut self, command_index: u64, point: FailPoint) {
        self.fail = Some((command_index, point));
    }

    pub fn flush(&mut self) -> Result<(), ServiceError> {
        Ok(self.ledger.flush()?)
    }

    /// Drops the service as a crash would: buffered ledger bytes are lost.
    pub fn crash(self) {
        self.ledger.abandon();
    }

    pub fn receipt(&self, seqno: u64) -> Result<Receipt, LedgerError> {
        self.ledger.get_receipt(seqno)
    }

    fn should_fail(&self, index: u64, p: FailPoint) -> Result<(), ServiceError> {
        if self.fail == Some((index, p)) {
            log::info!("injected crash at command {index}, {p:?}");
            return Err(ServiceError::Crashed(p));
        }
        Ok(())
    }

    /// Applies one committed command. Errors are fatal for the replica;
    /// request failures are reported in the response instead.
    pub fn apply(&mut self, index: u64, bytes: &[u8]) -> Result<Applied, ServiceError> {
        if index <= self.applied_index {
            return Ok(Applied { response: Response::ok(json!({ "already_applied": index })), event: None });
        }
        let cmd = match ServiceCommand::decode(bytes, &self.secrets.data_key) {
            Ok(c) => c,
            Err(e) => {
                self.applied_index = index;
                return Ok(Applied { response: Response::error(400, "malformed", e), event: None });
            }
        };
        let op = match cmd {
            ServiceCommand::Sign => {
                let seqno = self.ledger.sign_now()?;
                self.applied_index = index;
                let mut response = Response::ok(json!({ "signed": seqno.is_some() }));
                response.seqno = seqno;
                return Ok(Applied { response, event: None });
            }
            ServiceCommand::Genesis { genesis } => Op::Genesis(genesis),
            ServiceCommand::Request { request } => Op::Request(request),
            ServiceCommand::Join { join } => Op::Join(join),
            ServiceCommand::RetireNode { node_id } => Op::RetireNode(node_id),
            ServiceCommand::Private { .. } => unreachable!("decode unseals private commands"),
        };
        let (pending, mut response, event) = self.execute(index, op)?;
        if !pending.is_empty() {
            let n = pending.len();
            let mut first = None;
            for (i, p) in pending.into_iter().enumerate() {
                let payload = envelope(index, i + 1 == n, &p.body);
                let (seqno, _) = self.ledger.append(p.kind, p.privacy, &payload, Some(&self.secrets.data_key))?;
                first.get_or_insert(seqno);
                if i == 0 && n > 1 {
                    self.should_fail(index, FailPoint::MidGroup)?;
                }
            }
            self.ledger.sign_if_due()?;
            self.should_fail(index, FailPoint::BeforeFlush)?;
            if self.fail == Some((index, FailPoint::AfterFlush)) {
                self.ledger.flush()?;
                self.should_fail(index, FailPoint::AfterFlush)?;
            }
            response.seqno = first;
            response.receipt_hint = first.map(|s| format!("/node/receipt/{s}"));
        }
        self.applied_index = index;
        Ok(Applied { response, event })
    }

    fn execute(&mut self, index: u64, op: Op) -> Result<(Vec<Pending>, Response, Option<ServiceEvent>), ServiceError> {
        let gov_entries = |records: Vec<GovRecord>| -> Vec<Pending> {
            records.iter().map(|r| Pending { kind: EntryKind::Governance, privacy: Privacy::Public, body: r.to_payload() }).collect()
        };
        let Some(gov) = self.gov.as_mut() else {
            let Op::Genesis(g) = op else {
                return Ok((vec![], Response::error(503, "no_genesis", "service has no genesis yet"), None));
            };
            return Ok(match GovState::genesis(g) {
                Ok((state, records)) => {
                    self.gov = Some(state);
                    (gov_entries(records), Response::ok(json!({ "genesis": true })), None)
                }
                Err(e) => (vec![], gov_response(e), None),
            });
        };
        match op {
            Op::Genesis(_) => Ok((vec![], Response::error(409, "state", "genesis already applied"), None)),
            Op::Join(j) => {
                let node_id = j.node_id();
                match gov.process_join_request(j.quote.as_ref(), &j.node_identity) {
                    JoinDecision::Admit => {
                        let mut info = NodeInfo::new(j.node_identity, j.node_address.clone(), j.rpc_address.clone());
                        if let Some(q) = &j.quote {
                            info.measurement = Some(q.measurement);
                            info.platform_id = Some(q.platform_id.clone());
                        }
                        match gov.admit_node(info) {
                            Ok(records) => Ok((
                                gov_entries(records),
                                Response::ok(json!({ "admitted": true, "node_id": node_id })),
                                Some(ServiceEvent::NodeAdmitted { join: j }),
                            )),
                            Err(e) => Ok((vec![], gov_response(e), Some(ServiceEvent::NodeDenied { node_id, reason: "identity".into() }))),
                        }
                    }
                    JoinDecision::Deny(reason) => {
                        let r = serde_json::to_value(reason).expect("serializes");
                        let mut resp = Response::error(403, "join_denied", format!("{reason:?}"));
                        resp.body["reason"] = r.clone();
                        let reason = r.as_str().unwrap_or_default().to_string();
                        Ok((vec![], resp, Some(ServiceEvent::NodeDenied { node_id, reason })))
                    }
                }
            }
            Op::Admit(info) => {
                let records = gov.admit_node(info).map_err(|e| ServiceError::Replay { seqno: 0, reason: e.to_string() })?;
                Ok((gov_entries(records), Response::ok(json!({ "admitted": true })), None))
            }
            Op::RetireNode(node_id) => match gov.retire_node(node_id) {
                Ok(records) => Ok((gov_entries(records), Response::ok(json!({ "retired": node_id })), Some(ServiceEvent::NodeRetired { node_id }))),
                Err(e) => Ok((vec![], gov_response(e), None)),
            },
            Op::Request(req) => self.execute_request(index, req),
        }
    }

    fn execute_request(&mut self, index: u64, req: SignedRequest) -> Result<(Vec<Pending>, Response, Option<ServiceEvent>), ServiceError> {
        let gov = self.gov.as_mut().expect("checked by caller");
        let path = req.path.as_str();
        if path == PROPOSALS_PATH {
            let Some(action) = req.body.get("action").cloned().and_then(|a| serde_json::from_value::<Action>(a).ok()) else {
                return Ok((vec![], Response::error(400, "malformed", "body must be {\"action\": ...}"), None));
            };
            return Ok(match gov.submit_proposal(&req.signer_id, action, &req.signature) {
                Ok((id, records)) => (gov_pending(&records), Response::ok(json!({ "proposal_id": id, "state": "pending" })), None),
                Err(e) => (vec![], gov_response(e), None),
            });
        }
        if let Some(id) = path.strip_prefix("/gov/proposals/").and_then(|r| r.strip_suffix("/ballots")) {
            let Ok(id) = id.parse::<u64>() else {
                return Ok((vec![], Response::error(404, "not_found", format!("no route {path}")), None));
            };
            let Some(ballot) = req.body.get("ballot").cloned().and_then(|b| serde_json::from_value::<Ballot>(b).ok()) else {
                return Ok((vec![], Response::error(400, "malformed", "body must be {\"ballot\": \"yes\"|\"no\"}"), None));
            };
            return Ok(match gov.vote(&req.signer_id, id, ballot, &req.signature) {
                Ok((state, records)) => {
                    for r in &records {
                        if let GovRecord::Applied { effect: Effect::AppPolicyRegistered { policy }, .. } = r {
                            install_policy(&mut self.app, policy);
                        }
                    }
                    (gov_pending(&records), Response::ok(json!({ "proposal_id": id, "state": state })), None)
                }
                Err(e) => (vec![], gov_response(e), None),
            });
        }
        if !path.starts_with("/app/") {
            return Ok((vec![], Response::error(404, "not_found", format!("no route {path}")), None));
        }
        if gov.service.phase != Phase::Open {
            return Ok((vec![], Response::error(403, "service_not_open", "application requests need an open service"), None));
        }
        let confidential = gov.service.confidential_mode;
        let Some(app) = self.app.as_mut() else {
            return Ok((vec![], Response::error(503, "no_app_policy", "no application policy registered"), None));
        };
        let cmd = match AppCommand::from_request(path, &req.body) {
            Ok(c) => c,
            Err(e) => return Ok((vec![], settlement_response(e), None)),
        };
        let Some(signer) = app.party(&req.signer_id) else {
            return Ok((vec![], Response::error(403, "unauthorized", format!("unknown party {}", req.signer_id)), None));
        };
        if !req.verify(&signer.public_key) {
            return Ok((vec![], Response::error(401, "authentication", "request signature does not verify"), None));
        }
        let cosigner = match &req.cosigner_id {
            Some(c) => match app.party(c) {
                Some(p) if req.verify_cosigner(&p.public_key) => Some(c.as_str()),
                _ => return Ok((vec![], Response::error(401, "authentication", "co-signature does not verify"), None)),
            },
            None => None,
        };

        let result = if let AppCommand::Dvp(d) = &cmd {
            let pair = (req.signer_id.as_str(), cosigner.unwrap_or(""));
            if pair != (d.seller.as_str(), d.buyer.as_str()) && pair != (d.buyer.as_str(), d.seller.as_str()) {
                return Ok((vec![], Response::error(403, "unauthorized", "DvP needs both counterparties' signatures"), None));
            }
            let fail = self.fail;
            let hook = |stage: DvpStage| {
                let point = match stage {
                    DvpStage::Validated => FailPoint::DvpValidated,
                    DvpStage::AssetLegApplied => FailPoint::DvpAssetLegApplied,
                    DvpStage::CashLegApplied => FailPoint::DvpCashLegApplied,
                };
                if fail == Some((index, point)) {
                    Err(Interrupted)
                } else {
                    Ok(())
                }
            };
            match app.dvp_settle_with(d, hook) {
                Ok(Ok(crate::settlement::DvpOutcome::Settled)) => Ok(json!({ "outcome": "settled" })),
                Ok(Ok(crate::settlement::DvpOutcome::Failed { reason })) => Err(reason),
                Ok(Err(Interrupted)) => {
                    let (_, p) = fail.expect("only an armed fail point interrupts");
                    return Err(ServiceError::Crashed(p));
                }
                Err(e) => Err(e),
            }
        } else {
            app.execute(&req.signer_id, cosigner, &cmd)
        };
        match result {
            Ok(result) => {
                let privacy = if confidential && req.is_private() { Privacy::Private } else { Privacy::Public };
                let body = serde_json::to_vec(&AppRecord { request: req, result: result.clone() }).expect("records serialize");
                Ok((vec![Pending { kind: EntryKind::App, privacy, body }], Response::ok(result), None))
            }
            Err(e) => Ok((vec![], settlement_response(e), None)),
        }
    }

    /// Re-executes every command group of `src` and checks the produced
    /// entries against it.
    fn replay_from(&mut self, src: &Ledger) -> Result<(), ServiceError> {
        let key = self.secrets.data_key.clone();
        let entries = src.entries();
        let mut i = 0usize;
        while i < entries.len() {
            if entries[i].kind == EntryKind::Signature {
                i += 1;
                continue;
            }
            let seqno = entries[i].seqno;
            let bad = |reason: String| ServiceError::Replay { seqno, reason };
            let mut group = Vec::new();
            let index;
            loop {
                let e = entries.get(i).ok_or_else(|| bad("group runs off the end".into()))?;
                let plain = decrypt_payload(e, Some(&key)).map_err(|err| bad(err.to_string()))?;
                let (idx, last, body) = open_envelope(&plain).ok_or_else(|| bad("bad envelope".into()))?;
                group.push((e.kind, e.privacy, body.to_vec(), idx));
                i += 1;
                if last {
                    index = idx;
                    break;
                }
            }
            if group.iter().any(|g| g.3 != index) {
                return Err(bad("mixed command indices in a group".into()));
            }
            let op = match group[0].0 {
                EntryKind::Governance => match GovRecord::from_payload(&group[0].2).map_err(|e| bad(e.to_string()))? {
                    GovRecord::Genesis(g) => Op::Genesis(g),
                    GovRecord::Proposal { proposer, action, signature, .. } => Op::Request(SignedRequest {
                        path: PROPOSALS_PATH.into(),
                        body: json!({ "action": action }),
                        signer_id: proposer,
                        signature,
                        cosigner_id: None,
                        cosignature: None,
                    }),
                    GovRecord::Ballot { proposal_id, member_id, ballot, signature } => Op::Request(SignedRequest {
                        path: crate::governance::ballot_path(proposal_id),
                        body: json!({ "ballot": ballot }),
                        signer_id: member_id,
                        signature,
                        cosigner_id: None,
                        cosignature: None,
                    }),
                    GovRecord::NodeJoined(info) => Op::Admit(info),
                    GovRecord::NodeRetired { node_id } => Op::RetireNode(node_id),
                    other => return Err(bad(format!("group starts with derived record {other:?}"))),
                },
                EntryKind::App => {
                    let rec: AppRecord = serde_json::from_slice(&group[0].2).map_err(|e| bad(e.to_string()))?;
                    Op::Request(rec.request)
                }
                EntryKind::Signature => unreachable!("skipped above"),
            };
            let (pending, _, _) = self.execute(index, op)?;
            let stored: Vec<Pending> = group.into_iter().map(|(kind, privacy, body, _)| Pending { kind, privacy, body }).collect();
            if pending != stored {
                return Err(bad("re-executed command produced different entries".into()));
            }
            self.applied_index = index;
        }
        Ok(())
    }

    /// Serves a read from committed state.
    pub fn query(&self, req: &SignedRequest) -> Response {
        let Some(gov) = self.gov.as_ref() else {
            return Response::error(503, "no_genesis", "service has no genesis yet");
        };
        let path = req.path.as_str();
        if path == "/gov/service" {
            return Response::ok(json!({
                "phase": gov.service.phase,
                "service_identity": gov.service.service_identity,
                "confidential_mode": gov.service.confidential_mode,
                "trusted_measurements": gov.service.trusted_measurements,
                "constitution_version": gov.constitution.version,
                "proposal_count": gov.next_proposal_id,
                "members": gov.members,
                "nodes": gov.nodes.values().collect::<Vec<_>>(),
                "app_policy": gov.app_policy,
            }));
        }
        if let Some(id) = path.strip_prefix("/gov/proposals/") {
            return match id.parse::<u64>().ok().and_then(|i| gov.proposals.get(&i)) {
                Some(p) => Response::ok(serde_json::to_value(p).expect("serializes")),
                None => Response::error(404, "not_found", format!("no proposal {id}")),
            };
        }
        if !path.starts_with("/app/") {
            return Response::error(404, "not_found", format!("no route {path}"));
        }
        let Some(app) = self.app.as_ref() else {
            return Response::error(503, "no_app_policy", "no application policy registered");
        };
        // who is asking: a party, or a node operator (never entitled to app reads)
        let operator = gov.trusted_nodes().any(|n| req.signer_id == format!("node:{}", n.node_id) && req.verify(&n.identity));
        if operator {
            return Response::error(403, "operator_read_denied", "node operators have no application read access");
        }
        let Some(signer) = app.party(&req.signer_id).filter(|p| req.verify(&p.public_key)) else {
            return Response::error(401, "authentication", "application reads need a signature from a known party");
        };
        match path {
            "/app/balance" => {
                let party = req.body.get("party").and_then(Value::as_str).unwrap_or(&signer.party_id);
                let target = app.party(party);
                let allowed = party == signer.party_id
                    || signer.role == PartyRole::CentralBank
                    || target.is_some_and(|t| t.intermediary.as_deref() == Some(signer.party_id.as_str()));
                if !allowed {
                    return Response::error(403, "unauthorized", "balances are visible to their owner, its intermediary and the central bank");
                }
                app.balance_json(party).map(Response::ok).unwrap_or_else(settlement_response)
            }
            "/app/asset" => {
                let id = req.body.get("asset_id").and_then(Value::as_str).unwrap_or_default();
                match app.assets.get(id) {
                    Some(a) => Response::ok(serde_json::to_value(a).expect("serializes")),
                    None => Response::error(404, "not_found", format!("no asset {id}")),
                }
            }
            _ => match path.strip_prefix("/app/tx/").and_then(|s| s.parse::<u64>().ok()) {
                Some(seqno) => self.read_tx(seqno, signer.party_id.as_str(), signer.role),
                None => Response::error(404, "not_found", format!("no route {path}")),
            },
        }
    }

    fn read_tx(&self, seqno: u64, reader: &str, role: PartyRole) -> Response {
        let Some(e) = self.ledger.entry(seqno).filter(|e| e.kind == EntryKind::App) else {
            return Response::error(404, "not_found", format!("no application entry at {seqno}"));
        };
        let plain = match decrypt_payload(e, Some(&self.secrets.data_key)) {
            Ok(p) => p,
            Err(err) => return Response::error(500, "decrypt", err),
        };
        let Some(rec) = open_envelope(&plain).and_then(|(_, _, b)| serde_json::from_slice::<AppRecord>(b).ok()) else {
            return Response::error(500, "corrupt", "unreadable application record");
        };
        if e.privacy == Privacy::Private {
            let cmd = AppCommand::from_request(&rec.request.path, &rec.request.body).ok();
            let named = cmd.as_ref().is_some_and(|c| c.parties().contains(&reader));
            if !named && role != PartyRole::CentralBank && rec.request.signer_id != reader {
                return Response::error(403, "unauthorized", "private transactions are visible to their parties only");
            }
        }
        let mut r = Response::ok(json!({ "seqno": seqno, "privacy": e.privacy, "request": rec.request, "result": rec.result }));
        r.seqno = Some(seqno);
        r
    }
}

fn gov_pending(records: &[GovRecord]) -> Vec<Pending> {
    records.iter().map(|r| Pending { kind: EntryKind::Governance, privacy: Privacy::Public, body: r.to_payload() }).collect()
}

fn install_policy(app: &mut Option<SettlementState>, policy: &Value) {
    let parsed = match AppPolicy::from_json(policy) {
        Ok(p) => p,
        Err(e) => {
            log::error!("registered app policy is unusable, keeping the previous one: {e}");
            return;
        }
    };
    match app {
        None => *app = Some(SettlementState::new(parsed)),
        Some(s) => {
            if let Err(e) = s.update_policy(parsed) {
                log::error!("app policy update refused: {e}");
            }
        }
    }
}

/// Number of leading entries that form complete command groups, including
/// any Signature entries that follow them.
fn complete_prefix(ledger: &Ledger, key: &SymmetricKey) -> Result<u64, ServiceError> {
    let mut complete = 0u64;
    for e in ledger.entries() {
        if e.kind == EntryKind::Signature {
            if complete == e.seqno {
                complete = e.seqno + 1;
            }
            continue;
        }
        let plain = decrypt_payload(e, Some(key)).map_err(|err| ServiceError::Replay { seqno: e.seqno, reason: err.to_string() })?;
        let (_, last, _) = open_envelope(&plain).ok_or(ServiceError::Replay { seqno: e.seqno, reason: "bad envelope".into() })?;
        if last {
            complete = e.seqno + 1;
        }
    }
    Ok(complete)
}
