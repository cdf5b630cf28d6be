//! Browser bindings for three small demos: a tamper-evident ledger with
//! receipts, a settlement sandbox running both token models, and the
//! attestation gate.

use std::collections::{BTreeMap, BTreeSet};

use conledger_core::codec::Canonical;
use conledger_core::crypto::KeyPair;
use conledger_core::enclave::{measure, quote, verify_quote, Platform, QuoteVerdict, RejectReason};
use conledger_core::ledger::receipt::{verify_receipt_bytes, Receipt};
use conledger_core::ledger::{EntryKind, Ledger, LedgerConfig, Privacy};
use conledger_core::settlement::{AppCommand, AppPolicy, Party, PartyRole, SettlementState, TokenModel};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// An in-memory ledger signed with a fixed demo key.
#[wasm_bindgen]
pub struct DemoLedger {
    ledger: Ledger,
    key: KeyPair,
}

#[wasm_bindgen]
impl DemoLedger {
    #[wasm_bindgen(constructor)]
    pub fn new() -> DemoLedger {
        let key = KeyPair::from_seed([42; 32]);
        let mut ledger = Ledger::in_memory(LedgerConfig { signature_interval: 4, auto_sign: true });
        ledger.set_signer(key.clone());
        DemoLedger { ledger, key }
    }

    /// Appends a public entry and returns its seqno.
    pub fn append(&mut self, text: &str) -> Result<u64, JsError> {
        self.try_append(text).map_err(js)
    }

    /// Signs whatever is unsigned so every entry has a receipt.
    pub fn sign(&mut self) -> Result<(), JsError> {
        self.ledger.sign_now().map(drop).map_err(|e| js(err(e)))
    }

    pub fn len(&self) -> u64 {
        self.ledger.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ledger.is_empty()
    }

    pub fn root(&self) -> String {
        self.ledger.root().map(|r| r.to_hex()).unwrap_or_default()
    }

    pub fn service_key(&self) -> String {
        self.key.public().to_hex()
    }

    /// Hex of the canonical receipt bytes.
    pub fn receipt(&self, seqno: u64) -> Result<String, JsError> {
        self.try_receipt(seqno).map_err(js)
    }

    /// JSON view of a receipt, for display.
    pub fn describe_receipt(receipt_hex: &str) -> Result<String, JsError> {
        let r = hex::decode(receipt_hex).map_err(err).and_then(|b| Receipt::from_bytes(&b).map_err(err)).map_err(js)?;
        serde_json::to_string_pretty(&r).map_err(|e| js(err(e)))
    }

    /// Verifies a receipt, optionally after flipping one bit.
    pub fn verify(&self, receipt_hex: &str, flip_bit: Option<u32>) -> Result<bool, JsError> {
        self.try_verify(receipt_hex, flip_bit).map_err(js)
    }
}

impl DemoLedger {
    pub fn try_append(&mut self, text: &str) -> Result<u64, String> {
        let (seqno, _) = self.ledger.append(EntryKind::App, Privacy::Public, text.as_bytes(), None).map_err(err)?;
        Ok(seqno)
    }

    pub fn try_receipt(&self, seqno: u64) -> Result<String, String> {
        Ok(hex::encode(self.ledger.get_receipt(seqno).map_err(err)?.to_bytes()))
    }

    pub fn try_verify(&self, receipt_hex: &str, flip_bit: Option<u32>) -> Result<bool, String> {
        let mut bytes = hex::decode(receipt_hex).map_err(err)?;
        if let Some(b) = flip_bit {
            let i = (b / 8) as usize % bytes.len().max(1);
            bytes[i] ^= 1 << (b % 8);
        }
        Ok(verify_receipt_bytes(&bytes, &self.key.public()))
    }
}

impl Default for DemoLedger {
    fn default() -> Self {
        Self::new()
    }
}

/// The same commands applied to an account book and a UTXO book.
#[wasm_bindgen]
pub struct Sandbox {
    account: SettlementState,
    utxo: SettlementState,
    log: Vec<String>,
}

fn demo_parties() -> Vec<Party> {
    let p = |id: &str, role, intermediary: Option<&str>, seed: u8| Party {
        party_id: id.into(),
        role,
        public_key: KeyPair::from_seed([seed; 32]).public(),
        intermediary: intermediary.map(Into::into),
    };
    vec![
        p("cb", PartyRole::CentralBank, None, 1),
        p("bankA", PartyRole::Intermediary, None, 2),
        p("bankB", PartyRole::Intermediary, None, 3),
        p("client1", PartyRole::Client, Some("bankA"), 4),
        p("client2", PartyRole::Client, Some("bankB"), 5),
    ]
}

#[wasm_bindgen]
impl Sandbox {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Sandbox {
        let state = |model| SettlementState::new(AppPolicy { model, parties: demo_parties() });
        Sandbox { account: state(TokenModel::Account), utxo: state(TokenModel::Utxo), log: Vec::new() }
    }

    /// Runs `path` (e.g. `/app/transfer`) with a JSON body, signed by
    /// `signer` and optionally co-signed. Returns the account-model result.
    pub fn run(&mut self, signer: &str, cosigner: Option<String>, path: &str, body: &str) -> Result<String, JsError> {
        self.try_run(signer, cosigner.as_deref(), path, body).map_err(js)
    }

    /// Holdings, claims and invariant status of both books as JSON.
    pub fn state(&self) -> String {
        let view = |s: &SettlementState| {
            let parties: BTreeMap<_, _> =
                s.policy.parties.iter().map(|p| (p.party_id.clone(), s.balance_json(&p.party_id).unwrap_or_default())).collect();
            json!({
                "parties": parties,
                "total_minted": s.book.total_minted,
                "total_redeemed": s.book.total_redeemed,
                "invariants": s.check_invariants().map(|_| "hold".to_string()).unwrap_or_else(|e| e),
            })
        };
        json!({ "account": view(&self.account), "utxo": view(&self.utxo), "log": self.log }).to_string()
    }
}

impl Sandbox {
    pub fn try_run(&mut self, signer: &str, cosigner: Option<&str>, path: &str, body: &str) -> Result<String, String> {
        let body: serde_json::Value = serde_json::from_str(body).map_err(err)?;
        let cmd = AppCommand::from_request(path, &body).map_err(err)?;
        let a = self.account.execute(signer, cosigner, &cmd);
        let u = self.utxo.execute(signer, cosigner, &cmd);
        let line = match (&a, &u) {
            (Ok(_), Ok(_)) => format!("{signer} {path} ok"),
            (Err(e), Err(_)) => format!("{signer} {path} refused: {e}"),
            _ => format!("{signer} {path}: models disagree ({a:?} vs {u:?})"),
        };
        self.log.push(line);
        a.map(|v| v.to_string()).map_err(err)
    }
}

impl Default for Sandbox {
    fn default() -> Self {
        Self::new()
    }
}

/// Hex measurement of a code blob.
#[wasm_bindgen]
pub fn measure_code(code: &str) -> String {
    measure(code.as_bytes()).0.to_hex()
}

/// Quotes `code` on either the trusted platform or a rogue one with the
/// same id, then checks it against a service that trusts `trusted_code`.
/// Returns `"accept"` or the rejection reason.
#[wasm_bindgen]
pub fn attest(code: &str, trusted_code: &str, rogue_platform: bool) -> String {
    let platform = Platform::from_parts("emu-platform-0", [7; 32], [8; 32]);
    let signer = if rogue_platform { Platform::from_parts("emu-platform-0", [9; 32], [8; 32]) } else { platform.clone() };
    let node = KeyPair::from_seed([11; 32]);
    let q = quote(measure(code.as_bytes()), node.public(), &signer);
    let trusted: BTreeSet<_> = [measure(trusted_code.as_bytes())].into();
    let platforms: BTreeMap<_, _> = [(platform.id().to_string(), platform.public_key())].into();
    match verify_quote(&q, &trusted, &platforms) {
        QuoteVerdict::Accept => "accept".into(),
        QuoteVerdict::Reject(RejectReason::UnknownPlatform) => "unknown_platform".into(),
        QuoteVerdict::Reject(RejectReason::BadSignature) => "bad_signature".into(),
        QuoteVerdict::Reject(RejectReason::UntrustedCode) => "untrusted_code".into(),
    }
}
