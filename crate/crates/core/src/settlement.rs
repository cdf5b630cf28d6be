//! Wholesale CBDC settlement under the indirect model.
//!
//! The central bank mints to and redeems from intermediaries. Intermediaries
//! pay each other, issue claims to their clients, and trade registered assets
//! against CBDC with delivery-versus-payment. Every intermediary's client
//! claims must stay fully backed by its wholesale holding.
//!
//! Money is held either as account balances or as UTXOs, chosen by the app
//! policy. UTXO payments select the sender's outputs largest first (ties by
//! lower id) and return any excess as a single change output.
//!
//! Every operation validates before it mutates, so an error leaves the state
//! untouched. Amounts are integer minor units.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::crypto::PublicKey;
use crate::ledger::Privacy;

pub type PartyId = String;
pub type AssetId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartyRole {
    CentralBank,
    Intermediary,
    Client,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Party {
    pub party_id: PartyId,
    pub role: PartyRole,
    pub public_key: PublicKey,
    /// Set for clients only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediary: Option<PartyId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenModel {
    Account,
    Utxo,
}

/// The application policy registered through governance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppPolicy {
    pub model: TokenModel,
    pub parties: Vec<Party>,
}

impl AppPolicy {
    pub fn from_json(v: &Value) -> Result<Self, SettlementError> {
        let p: AppPolicy = serde_json::from_value(v.clone()).map_err(|e| SettlementError::Policy(e.to_string()))?;
        p.check()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("policy serializes")
    }

    fn check(&self) -> Result<(), SettlementError> {
        let bad = |m: String| Err(SettlementError::Policy(m));
        let mut ids = BTreeSet::new();
        for p in &self.parties {
            if !ids.insert(&p.party_id) {
                return bad(format!("duplicate party {}", p.party_id));
            }
        }
        let cbs = self.parties.iter().filter(|p| p.role == PartyRole::CentralBank).count();
        if cbs != 1 {
            return bad(format!("expected exactly one central bank, found {cbs}"));
        }
        for p in &self.parties {
            match (p.role, &p.intermediary) {
                (PartyRole::Client, Some(i)) => {
                    let ok = self.parties.iter().any(|q| q.party_id == *i && q.role == PartyRole::Intermediary);
                    if !ok {
                        return bad(format!("client {} names unknown intermediary {i}", p.party_id));
                    }
                }
                (PartyRole::Client, None) => return bad(format!("client {} has no intermediary", p.party_id)),
                (_, Some(_)) => return bad(format!("only clients attach to an intermediary ({})", p.party_id)),
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum SettlementError {
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("insufficient funds: {party} holds {have}, needs {need}")]
    InsufficientFunds { party: PartyId, have: u64, need: u64 },
    #[error("backing violation: {intermediary} would hold {holding_after} against {claims} of claims")]
    BackingViolation { intermediary: PartyId, holding_after: u64, claims: u64 },
    #[error("insufficient asset: {party} holds {have} of {asset}, needs {need}")]
    InsufficientAsset { party: PartyId, asset: AssetId, have: u64, need: u64 },
    #[error("claim of {client} on {intermediary} is {have}, cannot retire {need}")]
    InsufficientClaim { intermediary: PartyId, client: PartyId, have: u64, need: u64 },
    #[error("duplicate: {0}")]
    Duplicate(String),
    #[error("bad app policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utxo {
    pub owner: PartyId,
    pub amount: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbdcBalanceBook {
    pub model: TokenModel,
    pub accounts: BTreeMap<PartyId, u64>,
    pub utxos: BTreeMap<u64, Utxo>,
    pub next_utxo_id: u64,
    pub total_minted: u64,
    pub total_redeemed: u64,
}

impl CbdcBalanceBook {
    pub fn new(model: TokenModel) -> Self {
        CbdcBalanceBook {
            model,
            accounts: BTreeMap::new(),
            utxos: BTreeMap::new(),
            next_utxo_id: 0,
            total_minted: 0,
            total_redeemed: 0,
        }
    }

    pub fn holding(&self, p: &str) -> u64 {
        match self.model {
            TokenModel::Account => self.accounts.get(p).copied().unwrap_or(0),
            TokenModel::Utxo => self.utxos.values().filter(|u| u.owner == p).map(|u| u.amount).sum(),
        }
    }

    /// Per-party wholesale holdings, omitting zero holdings.
    pub fn holdings(&self) -> BTreeMap<PartyId, u64> {
        let mut out: BTreeMap<PartyId, u64> = BTreeMap::new();
        match self.model {
            TokenModel::Account => {
                for (p, a) in &self.accounts {
                    *out.entry(p.clone()).or_default() += a;
                }
            }
            TokenModel::Utxo => {
                for u in self.utxos.values() {
                    *out.entry(u.owner.clone()).or_default() += u.amount;
                }
            }
        }
        out.retain(|_, v| *v > 0);
        out
    }

    pub fn utxos_of(&self, p: &str) -> Vec<(u64, u64)> {
        self.utxos.iter().filter(|(_, u)| u.owner == p).map(|(id, u)| (*id, u.amount)).collect()
    }

    fn credit(&mut self, p: &str, amount: u64) {
        match self.model {
            TokenModel::Account => *self.accounts.entry(p.to_string()).or_default() += amount,
            TokenModel::Utxo => {
                let id = self.next_utxo_id;
                self.next_utxo_id += 1;
                self.utxos.insert(id, Utxo { owner: p.to_string(), amount });
            }
        }
    }

    /// Removes `amount` from `p`. Caller has checked the holding.
    fn debit(&mut self, p: &str, amount: u64) {
        match self.model {
            TokenModel::Account => {
                let bal = self.accounts.get_mut(p).expect("checked holding");
                *bal -= amount;
                if *bal == 0 {
                    self.accounts.remove(p);
                }
            }
            TokenModel::Utxo => {
                let mut mine = self.utxos_of(p);
                mine.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                let mut gathered = 0u64;
                for (id, amt) in mine {
                    if gathered >= amount {
                        break;
                    }
                    self.utxos.remove(&id);
                    gathered += amt;
                }
                assert!(gathered >= amount, "debit beyond holding");
                if gathered > amount {
                    self.credit(p, gathered - amount);
                }
            }
        }
    }

    /// Moves value, creating the payment output before the change output.
    fn pay(&mut self, from: &str, to: &str, amount: u64) {
        match self.model {
            TokenModel::Account => {
                self.debit(from, amount);
                self.credit(to, amount);
            }
            TokenModel::Utxo => {
                let mut mine = self.utxos_of(from);
                mine.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                let mut gathered = 0u64;
                for (id, amt) in mine {
                    if gathered >= amount {
                        break;
                    }
                    self.utxos.remove(&id);
                    gathered += amt;
                }
                assert!(gathered >= amount, "payment beyond holding");
                self.credit(to, amount);
                if gathered > amount {
                    self.credit(from, gathered - amount);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Asset {
    pub asset_id: AssetId,
    pub issuer: PartyId,
    pub quantity: u64,
    pub holdings: BTreeMap<PartyId, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DvpInstruction {
    pub instruction_id: String,
    pub seller: PartyId,
    pub buyer: PartyId,
    pub asset_id: AssetId,
    pub quantity: u64,
    pub price: u64,
    #[serde(default = "public")]
    pub privacy: Privacy,
}

fn public() -> Privacy {
    Privacy::Public
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DvpOutcome {
    Settled,
    Failed { reason: SettlementError },
}

/// Points inside DvP application where a crash can be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvpStage {
    Validated,
    AssetLegApplied,
    CashLegApplied,
}

/// Returned by a DvP hook to abandon application mid-way, as a crash would.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interrupted;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AppCommand {
    Mint { to: PartyId, amount: u64 },
    Redeem { from: PartyId, amount: u64 },
    Transfer { from: PartyId, to: PartyId, amount: u64 },
    IssueClaim { intermediary: PartyId, client: PartyId, amount: u64 },
    RetireClaim { intermediary: PartyId, client: PartyId, amount: u64 },
    RegisterAsset { asset_id: AssetId, quantity: u64, initial_holder: PartyId },
    Dvp(DvpInstruction),
}

impl AppCommand {
    /// Maps a client API path and JSON body to a command.
    pub fn from_request(path: &str, body: &Value) -> Result<Self, SettlementError> {
        let op = match path {
            "/app/mint" => "mint",
            "/app/redeem" => "redeem",
            "/app/transfer" => "transfer",
            "/app/issue-claim" => "issue_claim",
            "/app/retire-claim" => "retire_claim",
            "/app/register-asset" => "register_asset",
            "/app/dvp" => "dvp",
            _ => return Err(SettlementError::NotFound(format!("no app operation at {path}"))),
        };
        let mut obj = body.as_object().cloned().ok_or_else(|| SettlementError::Validation("body must be an object".into()))?;
        if op == "dvp" {
            let instr: DvpInstruction = serde_json::from_value(Value::Object(obj)).map_err(|e| SettlementError::Validation(e.to_string()))?;
            return Ok(AppCommand::Dvp(instr));
        }
        // privacy picks the ledger class; it is not part of the command
        obj.remove("privacy");
        obj.insert("op".into(), json!(op));
        serde_json::from_value(Value::Object(obj)).map_err(|e| SettlementError::Validation(e.to_string()))
    }

    /// Parties entitled to read the command when it is private.
    pub fn parties(&self) -> Vec<&str> {
        match self {
            AppCommand::Mint { to, .. } => vec![to],
            AppCommand::Redeem { from, .. } => vec![from],
            AppCommand::Transfer { from, to, .. } => vec![from, to],
            AppCommand::IssueClaim { intermediary, client, .. } | AppCommand::RetireClaim { intermediary, client, .. } => {
                vec![intermediary, client]
            }
            AppCommand::RegisterAsset { initial_holder, .. } => vec![initial_holder],
            AppCommand::Dvp(d) => vec![&d.seller, &d.buyer],
        }
    }

    pub fn changes_supply(&self) -> bool {
        matches!(self, AppCommand::Mint { .. } | AppCommand::Redeem { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementState {
    pub policy: AppPolicy,
    pub book: CbdcBalanceBook,
    /// intermediary -> client -> amount
    pub claims: BTreeMap<PartyId, BTreeMap<PartyId, u64>>,
    pub assets: BTreeMap<AssetId, Asset>,
    pub settled: BTreeSet<String>,
}

impl SettlementState {
    pub fn new(policy: AppPolicy) -> Self {
        SettlementState {
            book: CbdcBalanceBook::new(policy.model),
            policy,
            claims: BTreeMap::new(),
            assets: BTreeMap::new(),
            settled: BTreeSet::new(),
        }
    }

    /// Adopts a newer policy if it keeps the token model and every existing
    /// party with the same role.
    pub fn update_policy(&mut self, p: AppPolicy) -> Result<(), SettlementError> {
        if p.model != self.policy.model {
            return Err(SettlementError::Policy("token model cannot change".into()));
        }
        for old in &self.policy.parties {
            let kept = p.parties.iter().any(|n| n.party_id == old.party_id && n.role == old.role && n.intermediary == old.intermediary);
            if !kept {
                return Err(SettlementError::Policy(format!("party {} cannot be removed or changed", old.party_id)));
            }
        }
        self.policy = p;
        Ok(())
    }

    pub fn party(&self, id: &str) -> Option<&Party> {
        self.policy.parties.iter().find(|p| p.party_id == id)
    }

    pub fn central_bank(&self) -> &Party {
        self.policy.parties.iter().find(|p| p.role == PartyRole::CentralBank).expect("policy has a central bank")
    }

    fn role_of(&self, id: &str, role: PartyRole) -> Result<&Party, SettlementError> {
        match self.party(id) {
            Some(p) if p.role == role => Ok(p),
            Some(p) => Err(SettlementError::Unauthorized(format!("{id} is {:?}, not {role:?}", p.role))),
            None => Err(SettlementError::NotFound(format!("party {id}"))),
        }
    }

    fn intermediary(&self, id: &str) -> Result<&Party, SettlementError> {
        self.role_of(id, PartyRole::Intermediary)
    }

    pub fn holding(&self, p: &str) -> u64 {
        self.book.holding(p)
    }

    pub fn claims_of(&self, intermediary: &str) -> u64 {
        self.claims.get(intermediary).map(|c| c.values().sum()).unwrap_or(0)
    }

    pub fn claim(&self, intermediary: &str, client: &str) -> u64 {
        self.claims.get(intermediary).and_then(|c| c.get(client)).copied().unwrap_or(0)
    }

    pub fn asset_holding(&self, asset: &str, p: &str) -> u64 {
        self.assets.get(asset).and_then(|a| a.holdings.get(p)).copied().unwrap_or(0)
    }

    fn positive(amount: u64, what: &str) -> Result<(), SettlementError> {
        if amount == 0 {
            Err(SettlementError::Validation(format!("{what} must be positive")))
        } else {
            Ok(())
        }
    }

    /// Checks that `p` can pay `amount` and stay fully backed.
    fn can_pay(&self, p: &str, amount: u64) -> Result<(), SettlementError> {
        let have = self.holding(p);
        if have < amount {
            return Err(SettlementError::InsufficientFunds { party: p.to_string(), have, need: amount });
        }
        let claims = self.claims_of(p);
        if have - amount < claims {
            return Err(SettlementError::BackingViolation { intermediary: p.to_string(), holding_after: have - amount, claims });
        }
        Ok(())
    }

    pub fn mint(&mut self, issuer: &str, to: &str, amount: u64) -> Result<(), SettlementError> {
        self.role_of(issuer, PartyRole::CentralBank)?;
        Self::positive(amount, "amount")?;
        self.intermediary(to)?;
        let total = self.book.total_minted.checked_add(amount).ok_or_else(|| SettlementError::Validation("supply overflow".into()))?;
        self.book.credit(to, amount);
        self.book.total_minted = total;
        Ok(())
    }

    pub fn redeem(&mut self, from: &str, amount: u64) -> Result<(), SettlementError> {
        self.intermediary(from)?;
        Self::positive(amount, "amount")?;
        self.can_pay(from, amount)?;
        self.book.debit(from, amount);
        self.book.total_redeemed += amount;
        Ok(())
    }

    pub fn transfer(&mut self, from: &str, to: &str, amount: u64) -> Result<(), SettlementError> {
        self.intermediary(from)?;
        self.intermediary(to)?;
        Self::positive(amount, "amount")?;
        if from == to {
            return Err(SettlementError::Validation("cannot transfer to self".into()));
        }
        self.can_pay(from, amount)?;
        self.book.pay(from, to, amount);
        Ok(())
    }

    fn client_of(&self, intermediary: &str, client: &str) -> Result<(), SettlementError> {
        self.intermediary(intermediary)?;
        let c = self.role_of(client, PartyRole::Client)?;
        if c.intermediary.as_deref() != Some(intermediary) {
            return Err(SettlementError::Unauthorized(format!("{client} is not a client of {intermediary}")));
        }
        Ok(())
    }

    pub fn issue_claim(&mut self, intermediary: &str, client: &str, amount: u64) -> Result<(), SettlementError> {
        self.client_of(intermediary, client)?;
        Self::positive(amount, "amount")?;
        let holding = self.holding(intermediary);
        let claims = self.claims_of(intermediary);
        if claims.checked_add(amount).is_none_or(|c| c > holding) {
            return Err(SettlementError::BackingViolation {
                intermediary: intermediary.to_string(),
                holding_after: holding,
                claims: claims.saturating_add(amount),
            });
        }
        *self.claims.entry(intermediary.to_string()).or_default().entry(client.to_string()).or_default() += amount;
        Ok(())
    }

    pub fn retire_claim(&mut self, intermediary: &str, client: &str, amount: u64) -> Result<(), SettlementError> {
        self.client_of(intermediary, client)?;
        Self::positive(amount, "amount")?;
        let have = self.claim(intermediary, client);
        if have < amount {
            return Err(SettlementError::InsufficientClaim {
                intermediary: intermediary.to_string(),
                client: client.to_string(),
                have,
                need: amount,
            });
        }
        let book = self.claims.get_mut(intermediary).expect("claim exists");
        if have == amount {
            book.remove(client);
            if book.is_empty() {
                self.claims.remove(intermediary);
            }
        } else {
            *book.get_mut(client).expect("claim exists") -= amount;
        }
        Ok(())
    }

    pub fn register_asset(&mut self, issuer: &str, asset_id: &str, quantity: u64, initial_holder: &str) -> Result<(), SettlementError> {
        match self.party(issuer) {
            None => return Err(SettlementError::NotFound(format!("party {issuer}"))),
            Some(p) if p.role == PartyRole::Client => {
                return Err(SettlementError::Unauthorized("clients cannot issue assets".into()))
            }
            Some(_) => {}
        }
        self.intermediary(initial_holder)?;
        Self::positive(quantity, "quantity")?;
        if asset_id.is_empty() {
            return Err(SettlementError::Validation("asset id is empty".into()));
        }
        if self.assets.contains_key(asset_id) {
            return Err(SettlementError::Duplicate(format!("asset {asset_id}")));
        }
        self.assets.insert(
            asset_id.to_string(),
            Asset {
                asset_id: asset_id.to_string(),
                issuer: issuer.to_string(),
                quantity,
                holdings: BTreeMap::from([(initial_holder.to_string(), quantity)]),
            },
        );
        Ok(())
    }

    pub fn dvp_settle(&mut self, d: &DvpInstruction) -> Result<DvpOutcome, SettlementError> {
        self.dvp_settle_with(d, |_| Ok(())).map(|r| r.expect("hook never interrupts"))
    }

    /// DvP with a hook called at each stage. If the hook interrupts, the
    /// state is left exactly as a crash at that point would leave memory;
    /// callers must discard it.
    pub fn dvp_settle_with(
        &mut self,
        d: &DvpInstruction,
        mut hook: impl FnMut(DvpStage) -> Result<(), Interrupted>,
    ) -> Result<Result<DvpOutcome, Interrupted>, SettlementError> {
        self.intermediary(&d.seller)?;
        self.intermediary(&d.buyer)?;
        if d.seller == d.buyer {
            return Err(SettlementError::Validation("seller and buyer must differ".into()));
        }
        Self::positive(d.quantity, "quantity")?;
        Self::positive(d.price, "price")?;
        if !self.assets.contains_key(&d.asset_id) {
            return Err(SettlementError::NotFound(format!("asset {}", d.asset_id)));
        }
        if self.settled.contains(&d.instruction_id) {
            return Err(SettlementError::Duplicate(format!("instruction {}", d.instruction_id)));
        }
        let have = self.asset_holding(&d.asset_id, &d.seller);
        if have < d.quantity {
            let reason = SettlementError::InsufficientAsset { party: d.seller.clone(), asset: d.asset_id.clone(), have, need: d.quantity };
            return Ok(Ok(DvpOutcome::Failed { reason }));
        }
        if let Err(reason) = self.can_pay(&d.buyer, d.price) {
            return Ok(Ok(DvpOutcome::Failed { reason }));
        }
        if hook(DvpStage::Validated).is_err() {
            return Ok(Err(Interrupted));
        }

        let asset = self.assets.get_mut(&d.asset_id).expect("checked");
        let s = asset.holdings.get_mut(&d.seller).expect("checked");
        *s -= d.quantity;
        if *s == 0 {
            asset.holdings.remove(&d.seller);
        }
        *asset.holdings.entry(d.buyer.clone()).or_default() += d.quantity;
        if hook(DvpStage::AssetLegApplied).is_err() {
            return Ok(Err(Interrupted));
        }

        self.book.pay(&d.buyer, &d.seller, d.price);
        self.settled.insert(d.instruction_id.clone());
        if hook(DvpStage::CashLegApplied).is_err() {
            return Ok(Err(Interrupted));
        }
        Ok(Ok(DvpOutcome::Settled))
    }

    /// Checks who signed against who must, then executes.
    ///
    /// Mint needs the central bank; redeem needs the intermediary plus a
    /// central-bank co-signature; transfers and claims need the paying or
    /// issuing intermediary; asset registration is signed by its issuer; a
    /// DvP is signed by one counterparty and co-signed by the other.
    pub fn execute(&mut self, signer: &str, cosigner: Option<&str>, cmd: &AppCommand) -> Result<Value, SettlementError> {
        let deny = |m: &str| Err(SettlementError::Unauthorized(m.to_string()));
        let cb = self.central_bank().party_id.clone();
        match cmd {
            AppCommand::Mint { to, amount } => {
                self.mint(signer, to, *amount)?;
            }
            AppCommand::Redeem { from, amount } => {
                if signer != from {
                    return deny("redeem must be signed by the redeeming intermediary");
                }
                if cosigner != Some(cb.as_str()) {
                    return deny("redeem must be co-signed by the central bank");
                }
                self.redeem(from, *amount)?;
            }
            AppCommand::Transfer { from, to, amount } => {
                if signer != from {
                    return deny("transfer must be signed by the sender");
                }
                self.transfer(from, to, *amount)?;
            }
            AppCommand::IssueClaim { intermediary, client, amount } => {
                if signer != intermediary {
                    return deny("claims are issued by their intermediary");
                }
                self.issue_claim(intermediary, client, *amount)?;
            }
            AppCommand::RetireClaim { intermediary, client, amount } => {
                if signer != intermediary {
                    return deny("claims are retired by their intermediary");
                }
                self.retire_claim(intermediary, client, *amount)?;
            }
            AppCommand::RegisterAsset { asset_id, quantity, initial_holder } => {
                self.register_asset(signer, asset_id, *quantity, initial_holder)?;
            }
            AppCommand::Dvp(d) => {
                let pair = (signer, cosigner.unwrap_or(""));
                let ok = pair == (d.seller.as_str(), d.buyer.as_str()) || pair == (d.buyer.as_str(), d.seller.as_str());
                if !ok {
                    return deny("DvP needs both counterparties' signatures");
                }
                let out = self.dvp_settle(d)?;
                return Ok(serde_json::to_value(out).expect("outcome serializes"));
            }
        }
        Ok(json!({ "outcome": "ok" }))
    }

    pub fn balance_json(&self, p: &str) -> Result<Value, SettlementError> {
        let party = self.party(p).ok_or_else(|| SettlementError::NotFound(format!("party {p}")))?;
        let mut v = json!({ "party_id": p, "role": party.role });
        match party.role {
            PartyRole::Client => {
                let i = party.intermediary.clone().unwrap_or_default();
                v["claim"] = json!(self.claim(&i, p));
                v["intermediary"] = json!(i);
            }
            _ => {
                v["holding"] = json!(self.holding(p));
                v["claims_issued"] = json!(self.claims_of(p));
                if self.book.model == TokenModel::Utxo {
                    v["utxos"] = json!(self.book.utxos_of(p));
                }
            }
        }
        Ok(v)
    }

    /// The conservation, backing and asset invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let held: u64 = self.book.holdings().values().sum();
        if held != self.book.total_minted - self.book.total_redeemed {
            return Err(format!("holdings {held} != minted {} - redeemed {}", self.book.total_minted, self.book.total_redeemed));
        }
        for i in self.claims.keys() {
            if self.claims_of(i) > self.holding(i) {
                return Err(format!("{i} claims exceed holding"));
            }
        }
        for a in self.assets.values() {
            if a.holdings.values().sum::<u64>() != a.quantity {
                return Err(format!("asset {} not conserved", a.asset_id));
            }
        }
        Ok(())
    }
}
