//! Consortium governance.
//!
//! Governance state is event sourced. Every operation returns the
//! [`GovRecord`]s it produced; the applier writes each one as its own
//! Governance ledger entry, and [`GovState::replay`] rebuilds the state from
//! those entries by re-executing the input records (genesis, proposals,
//! ballots, node joins and retirements) and checking that the derived records
//! (resolutions and effects) come out identical.
//!
//! Record payloads are UTF-8 JSON. Struct fields appear in declaration order
//! and every map is key-ordered, so a record has exactly one encoding.
//!
//! Proposals resolve when a ballot is cast. A proposal is accepted once its
//! Yes ballots from Active members exceed the constitution's threshold
//! fraction of Active members, and rejected as soon as its No ballots make
//! that impossible. Until then a member may change its ballot; the last one
//! counts. Ballots are public and proposals never expire.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::codec::request_signing_bytes;
use crate::consensus::NodeId;
use crate::crypto::{PublicKey, Signature};
use crate::enclave::{verify_quote, AttestationQuote, Measurement, QuoteVerdict, RejectReason};

pub type MemberId = String;
pub type ProposalId = u64;

pub const PROPOSALS_PATH: &str = "/gov/proposals";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    AddMember,
    RetireMember,
    AddTrustedMeasurement,
    RemoveTrustedMeasurement,
    TransitionServiceToOpen,
    SetConstitution,
    RegisterAppPolicy,
}

impl ActionKind {
    pub const ALL: [ActionKind; 7] = [
        ActionKind::AddMember,
        ActionKind::RetireMember,
        ActionKind::AddTrustedMeasurement,
        ActionKind::RemoveTrustedMeasurement,
        ActionKind::TransitionServiceToOpen,
        ActionKind::SetConstitution,
        ActionKind::RegisterAppPolicy,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    AddMember { member_id: MemberId, public_key: PublicKey },
    RetireMember { member_id: MemberId },
    /// Hex-encoded measurement.
    AddTrustedMeasurement { measurement: String },
    RemoveTrustedMeasurement { measurement: String },
    TransitionServiceToOpen,
    /// Replaces the constitution; the new version is the current one plus 1.
    SetConstitution {
        resolve: ResolveRule,
        validate_rules: Vec<RuleId>,
        enabled_actions: BTreeSet<ActionKind>,
    },
    /// Opaque application policy JSON, interpreted by the application.
    RegisterAppPolicy { policy: Value },
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::AddMember { .. } => ActionKind::AddMember,
            Action::RetireMember { .. } => ActionKind::RetireMember,
            Action::AddTrustedMeasurement { .. } => ActionKind::AddTrustedMeasurement,
            Action::RemoveTrustedMeasurement { .. } => ActionKind::RemoveTrustedMeasurement,
            Action::TransitionServiceToOpen => ActionKind::TransitionServiceToOpen,
            Action::SetConstitution { .. } => ActionKind::SetConstitution,
            Action::RegisterAppPolicy { .. } => ActionKind::RegisterAppPolicy,
        }
    }
}

/// Structural validation rules a constitution can enforce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleId {
    ActionEnabled,
    MemberIdWellFormed,
    MemberIsNew,
    MemberKeyUnique,
    MemberNotNodeIdentity,
    MemberIsActive,
    KeepsOneActiveMember,
    #[serde(rename = "measurement_is_32_bytes")]
    MeasurementIs32Bytes,
    MeasurementIsTrusted,
    ThresholdInRange,
    PolicyIsObject,
}

impl RuleId {
    pub const ALL: [RuleId; 11] = [
        RuleId::ActionEnabled,
        RuleId::MemberIdWellFormed,
        RuleId::MemberIsNew,
        RuleId::MemberKeyUnique,
        RuleId::MemberNotNodeIdentity,
        RuleId::MemberIsActive,
        RuleId::KeepsOneActiveMember,
        RuleId::MeasurementIs32Bytes,
        RuleId::MeasurementIsTrusted,
        RuleId::ThresholdInRange,
        RuleId::PolicyIsObject,
    ];
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum serializes");
        f.write_str(s.as_str().expect("string"))
    }
}

/// Accept iff `yes / active > numerator / denominator`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolveRule {
    pub numerator: u64,
    pub denominator: u64,
}

impl ResolveRule {
    pub const STRICT_MAJORITY: ResolveRule = ResolveRule { numerator: 1, denominator: 2 };

    pub fn accepts(&self, yes: u64, active: u64) -> bool {
        yes as u128 * self.denominator as u128 > self.numerator as u128 * active as u128
    }

    /// True once `no` ballots leave too few members to ever accept.
    pub fn rejects(&self, no: u64, active: u64) -> bool {
        !self.accepts(active.saturating_sub(no), active)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constitution {
    pub version: u64,
    pub validate_rules: Vec<RuleId>,
    pub resolve: ResolveRule,
    pub enabled_actions: BTreeSet<ActionKind>,
}

impl Default for Constitution {
    fn default() -> Self {
        Constitution {
            version: 1,
            validate_rules: RuleId::ALL.to_vec(),
            resolve: ResolveRule::STRICT_MAJORITY,
            enabled_actions: ActionKind::ALL.into_iter().collect(),
        }
    }
}

impl Constitution {
    fn enforces(&self, r: RuleId) -> bool {
        self.validate_rules.contains(&r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberStatus {
    Active,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub member_id: MemberId,
    pub public_key: PublicKey,
    pub status: MemberStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ballot {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalState {
    Pending,
    Accepted,
    Rejected,
    Applied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub proposal_id: ProposalId,
    pub proposer: MemberId,
    pub action: Action,
    pub ballots: BTreeMap<MemberId, Ballot>,
    pub state: ProposalState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Opening,
    Open,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceStatus {
    pub phase: Phase,
    pub service_identity: PublicKey,
    pub trusted_measurements: BTreeSet<Measurement>,
    pub trusted_platforms: BTreeMap<String, PublicKey>,
    pub confidential_mode: bool,
    /// Node identities admitted without attestation when confidential mode
    /// is off.
    pub allowed_nodes: BTreeSet<PublicKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Trusted,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub node_id: NodeId,
    pub identity: PublicKey,
    pub node_address: String,
    pub rpc_address: String,
    pub measurement: Option<Measurement>,
    pub platform_id: Option<String>,
    pub status: NodeStatus,
}

impl NodeInfo {
    pub fn new(identity: PublicKey, node_address: impl Into<String>, rpc_address: impl Into<String>) -> Self {
        NodeInfo {
            node_id: identity.fingerprint(),
            identity,
            node_address: node_address.into(),
            rpc_address: rpc_address.into(),
            measurement: None,
            platform_id: None,
            status: NodeStatus::Trusted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub member_id: MemberId,
    pub public_key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genesis {
    pub constitution: Constitution,
    pub members: Vec<MemberSpec>,
    pub service_identity: PublicKey,
    pub trusted_platforms: BTreeMap<String, PublicKey>,
    pub trusted_measurements: BTreeSet<Measurement>,
    pub confidential_mode: bool,
    pub allowed_nodes: BTreeSet<PublicKey>,
    pub first_node: NodeInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    MemberAdded { member_id: MemberId, public_key: PublicKey },
    MemberRetired { member_id: MemberId },
    MeasurementTrusted { measurement: Measurement },
    MeasurementUntrusted { measurement: Measurement },
    ServiceOpened,
    /// Opening an already open service changes nothing.
    ServiceAlreadyOpen,
    ConstitutionSet { constitution: Constitution },
    AppPolicyRegistered { policy: Value },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum GovRecord {
    Genesis(Genesis),
    Proposal { proposal_id: ProposalId, proposer: MemberId, action: Action, signature: Signature },
    Ballot { proposal_id: ProposalId, member_id: MemberId, ballot: Ballot, signature: Signature },
    Resolved { proposal_id: ProposalId, state: ProposalState },
    Applied { proposal_id: ProposalId, effect: Effect },
    NodeJoined(NodeInfo),
    NodeRetired { node_id: NodeId },
}

impl GovRecord {
    pub fn to_payload(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("governance records serialize")
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GovError {
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("signature does not verify")]
    Authentication,
    #[error("validation failed: rule {rule}")]
    Validation { rule: RuleId },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("proposal {proposal_id} is {state:?}, not pending")]
    State { proposal_id: ProposalId, state: ProposalState },
    #[error("invalid genesis: {0}")]
    Genesis(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("replay diverged at record {index}: {reason}")]
pub struct ReplayError {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinDenial {
    UntrustedCode,
    UnknownPlatform,
    BadSignature,
    NotAllowListed,
    IdentityIsMember,
}

impl From<RejectReason> for JoinDenial {
    fn from(r: RejectReason) -> Self {
        match r {
            RejectReason::UnknownPlatform => JoinDenial::UnknownPlatform,
            RejectReason::UntrustedCode => JoinDenial::UntrustedCode,
            RejectReason::BadSignature => JoinDenial::BadSignature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JoinDecision {
    Admit,
    Deny(JoinDenial),
}

pub fn proposal_signing_bytes(member: &str, action: &Action) -> Vec<u8> {
    request_signing_bytes(member, PROPOSALS_PATH, &json!({ "action": action }))
}

pub fn ballot_path(proposal_id: ProposalId) -> String {
    format!("{PROPOSALS_PATH}/{proposal_id}/ballots")
}

pub fn ballot_signing_bytes(member: &str, proposal_id: ProposalId, ballot: Ballot) -> Vec<u8> {
    request_signing_bytes(member, &ballot_path(proposal_id), &json!({ "ballot": ballot }))
}

fn member_id_well_formed(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn parse_measurement(hex_str: &str) -> Option<Measurement> {
    let raw = hex::decode(hex_str).ok()?;
    let arr: [u8; 32] = raw.try_into().ok()?;
    Some(Measurement(crate::crypto::Digest(arr)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GovState {
    pub constitution: Constitution,
    pub members: BTreeMap<MemberId, Member>,
    pub proposals: BTreeMap<ProposalId, Proposal>,
    pub service: ServiceStatus,
    pub nodes: BTreeMap<NodeId, NodeInfo>,
    pub app_policy: Option<Value>,
    pub next_proposal_id: ProposalId,
}

impl GovState {
    pub fn genesis(g: Genesis) -> Result<(GovState, Vec<GovRecord>), GovError> {
        if g.constitution.version != 1 {
            return Err(GovError::Genesis("initial constitution must be version 1".into()));
        }
        if g.members.is_empty() {
            return Err(GovError::Genesis("at least one member is required".into()));
        }
        let mut members = BTreeMap::new();
        for m in &g.members {
            if !member_id_well_formed(&m.member_id) {
                return Err(GovError::Genesis(format!("malformed member id {:?}", m.member_id)));
            }
            if m.public_key == g.first_node.identity || m.public_key == g.service_identity {
                return Err(GovError::Genesis(format!("member {} uses a node or service key", m.member_id)));
            }
            let dup = members.values().any(|x: &Member| x.public_key == m.public_key);
            let prev = members.insert(
                m.member_id.clone(),
                Member { member_id: m.member_id.clone(), public_key: m.public_key, status: MemberStatus::Active },
            );
            if prev.is_some() || dup {
                return Err(GovError::Genesis(format!("duplicate member {}", m.member_id)));
            }
        }
        let state = GovState {
            constitution: g.constitution.clone(),
            members,
            proposals: BTreeMap::new(),
            service: ServiceStatus {
                phase: Phase::Opening,
                service_identity: g.service_identity,
                trusted_measurements: g.trusted_measurements.clone(),
                trusted_platforms: g.trusted_platforms.clone(),
                confidential_mode: g.confidential_mode,
                allowed_nodes: g.allowed_nodes.clone(),
            },
            nodes: BTreeMap::from([(g.first_node.node_id, g.first_node.clone())]),
            app_policy: None,
            next_proposal_id: 0,
        };
        Ok((state, vec![GovRecord::Genesis(g)]))
    }

    pub fn active_members(&self) -> impl Iterator<Item = &Member> {
        self.members.values().filter(|m| m.status == MemberStatus::Active)
    }

    pub fn is_node_identity(&self, k: &PublicKey) -> bool {
        self.nodes.values().any(|n| n.identity == *k) || self.service.service_identity == *k
    }

    pub fn is_member_key(&self, k: &PublicKey) -> bool {
        self.members.values().any(|m| m.public_key == *k)
    }

    pub fn trusted_nodes(&self) -> impl Iterator<Item = &NodeInfo> {
        self.nodes.values().filter(|n| n.status == NodeStatus::Trusted)
    }

    fn active_member(&self, id: &str) -> Result<&Member, GovError> {
        match self.members.get(id) {
            Some(m) if m.status == MemberStatus::Active => Ok(m),
            Some(_) => Err(GovError::Unauthorized(format!("member {id} is retired"))),
            None => Err(GovError::Unauthorized(format!("unknown member {id}"))),
        }
    }

    /// Checks `action` against the constitution's structural rules.
    pub fn validate(&self, action: &Action) -> Result<(), GovError> {
        let c = &self.constitution;
        let check = |rule: RuleId, ok: bool| if c.enforces(rule) && !ok { Err(GovError::Validation { rule }) } else { Ok(()) };
        check(RuleId::ActionEnabled, c.enabled_actions.contains(&action.kind()))?;
        match action {
            Action::AddMember { member_id, public_key } => {
                check(RuleId::MemberIdWellFormed, member_id_well_formed(member_id))?;
                check(RuleId::MemberIsNew, !self.members.contains_key(member_id))?;
                check(RuleId::MemberKeyUnique, !self.is_member_key(public_key))?;
                check(RuleId::MemberNotNodeIdentity, !self.is_node_identity(public_key))?;
            }
            Action::RetireMember { member_id } => {
                let active = self.members.get(member_id).is_some_and(|m| m.status == MemberStatus::Active);
                check(RuleId::MemberIsActive, active)?;
                let remaining = self.active_members().filter(|m| m.member_id != *member_id).count();
                check(RuleId::KeepsOneActiveMember, remaining > 0)?;
            }
            // an unparseable measurement can never be applied, so this one
            // holds even when the constitution drops the rule
            Action::AddTrustedMeasurement { measurement } => {
                if parse_measurement(measurement).is_none() {
                    return Err(GovError::Validation { rule: RuleId::MeasurementIs32Bytes });
                }
            }
            Action::RemoveTrustedMeasurement { measurement } => {
                let m = parse_measurement(measurement);
                if m.is_none() {
                    return Err(GovError::Validation { rule: RuleId::MeasurementIs32Bytes });
                }
                let trusted = m.is_some_and(|m| self.service.trusted_measurements.contains(&m));
                check(RuleId::MeasurementIsTrusted, trusted)?;
            }
            Action::TransitionServiceToOpen => {}
            Action::SetConstitution { resolve, .. } => {
                let ok = resolve.denominator > 0 && resolve.numerator < resolve.denominator;
                check(RuleId::ThresholdInRange, ok)?;
            }
            Action::RegisterAppPolicy { policy } => {
                check(RuleId::PolicyIsObject, policy.is_object())?;
            }
        }
        Ok(())
    }

    pub fn submit_proposal(
        &mut self,
        member: &str,
        action: Action,
        signature: &Signature,
    ) -> Result<(ProposalId, Vec<GovRecord>), GovError> {
        let m = self.active_member(member)?;
        m.public_key
            .verify(&proposal_signing_bytes(member, &action), signature)
            .map_err(|_| GovError::Authentication)?;
        self.validate(&action)?;
        let id = self.next_proposal_id;
        self.next_proposal_id += 1;
        self.proposals.insert(
            id,
            Proposal {
                proposal_id: id,
                proposer: member.to_string(),
                action: action.clone(),
                ballots: BTreeMap::new(),
                state: ProposalState::Pending,
            },
        );
        let rec = GovRecord::Proposal { proposal_id: id, proposer: member.to_string(), action, signature: *signature };
        Ok((id, vec![rec]))
    }

    pub fn vote(
        &mut self,
        member: &str,
        proposal_id: ProposalId,
        ballot: Ballot,
        signature: &Signature,
    ) -> Result<(ProposalState, Vec<GovRecord>), GovError> {
        let m = self.active_member(member)?;
        m.public_key
            .verify(&ballot_signing_bytes(member, proposal_id, ballot), signature)
            .map_err(|_| GovError::Authentication)?;
        let p = self
            .proposals
            .get(&proposal_id)
            .ok_or_else(|| GovError::NotFound(format!("proposal {proposal_id}")))?;
        if p.state != ProposalState::Pending {
            return Err(GovError::State { proposal_id, state: p.state });
        }

        let mut records = vec![GovRecord::Ballot {
            proposal_id,
            member_id: member.to_string(),
            ballot,
            signature: *signature,
        }];
        let mut ballots = p.ballots.clone();
        ballots.insert(member.to_string(), ballot);
        let active = self.active_members().count() as u64;
        let count = |b: Ballot| {
            ballots
                .iter()
                .filter(|(id, v)| **v == b && self.members.get(*id).is_some_and(|m| m.status == MemberStatus::Active))
                .count() as u64
        };
        let (yes, no) = (count(Ballot::Yes), count(Ballot::No));
        let rule = self.constitution.resolve;
        let action = p.action.clone();

        let state = if rule.accepts(yes, active) {
            match self.validate(&action) {
                Ok(()) => {
                    let effect = self.effect_of(&action);
                    records.push(GovRecord::Resolved { proposal_id, state: ProposalState::Accepted });
                    records.push(GovRecord::Applied { proposal_id, effect: effect.clone() });
                    self.apply_effect(&effect);
                    ProposalState::Applied
                }
                Err(e) => {
                    // accepted, but no longer valid against the current state
                    log::warn!("proposal {proposal_id} accepted but invalid at apply time: {e}");
                    records.push(GovRecord::Resolved { proposal_id, state: ProposalState::Rejected });
                    ProposalState::Rejected
                }
            }
        } else if rule.rejects(no, active) {
            records.push(GovRecord::Resolved { proposal_id, state: ProposalState::Rejected });
            ProposalState::Rejected
        } else {
            ProposalState::Pending
        };
        let p = self.proposals.get_mut(&proposal_id).expect("checked above");
        p.ballots = ballots;
        p.state = state;
        Ok((state, records))
    }

    fn effect_of(&self, action: &Action) -> Effect {
        match action {
            Action::AddMember { member_id, public_key } => Effect::MemberAdded { member_id: member_id.clone(), public_key: *public_key },
            Action::RetireMember { member_id } => Effect::MemberRetired { member_id: member_id.clone() },
            Action::AddTrustedMeasurement { measurement } => Effect::MeasurementTrusted {
                measurement: parse_measurement(measurement).expect("validated"),
            },
            Action::RemoveTrustedMeasurement { measurement } => Effect::MeasurementUntrusted {
                measurement: parse_measurement(measurement).expect("validated"),
            },
            Action::TransitionServiceToOpen => match self.service.phase {
                Phase::Opening => Effect::ServiceOpened,
                Phase::Open => {
                    log::warn!("service is already open; transition is a no-op");
                    Effect::ServiceAlreadyOpen
                }
            },
            Action::SetConstitution { resolve, validate_rules, enabled_actions } => Effect::ConstitutionSet {
                constitution: Constitution {
                    version: self.constitution.version + 1,
                    validate_rules: validate_rules.clone(),
                    resolve: *resolve,
                    enabled_actions: enabled_actions.clone(),
                },
            },
            Action::RegisterAppPolicy { policy } => Effect::AppPolicyRegistered { policy: policy.clone() },
        }
    }

    fn apply_effect(&mut self, e: &Effect) {
        match e {
            Effect::MemberAdded { member_id, public_key } => {
                self.members.insert(
                    member_id.clone(),
                    Member { member_id: member_id.clone(), public_key: *public_key, status: MemberStatus::Active },
                );
            }
            Effect::MemberRetired { member_id } => {
                if let Some(m) = self.members.get_mut(member_id) {
                    m.status = MemberStatus::Retired;
                }
            }
            Effect::MeasurementTrusted { measurement } => {
                self.service.trusted_measurements.insert(*measurement);
            }
            Effect::MeasurementUntrusted { measurement } => {
                self.service.trusted_measurements.remove(measurement);
            }
            Effect::ServiceOpened => self.service.phase = Phase::Open,
            Effect::ServiceAlreadyOpen => {}
            Effect::ConstitutionSet { constitution } => self.constitution = constitution.clone(),
            Effect::AppPolicyRegistered { policy } => self.app_policy = Some(policy.clone()),
        }
    }

    /// Admission decision for a node that wants to join.
    pub fn process_join_request(&self, quote: Option<&AttestationQuote>, node_identity: &PublicKey) -> JoinDecision {
        if self.is_member_key(node_identity) {
            return JoinDecision::Deny(JoinDenial::IdentityIsMember);
        }
        if !self.service.confidential_mode {
            return if self.service.allowed_nodes.contains(node_identity) {
                JoinDecision::Admit
            } else {
                JoinDecision::Deny(JoinDenial::NotAllowListed)
            };
        }
        let Some(q) = quote else {
            return JoinDecision::Deny(JoinDenial::BadSignature);
        };
        if q.node_identity != *node_identity {
            return JoinDecision::Deny(JoinDenial::BadSignature);
        }
        match verify_quote(q, &self.service.trusted_measurements, &self.service.trusted_platforms) {
            QuoteVerdict::Accept => JoinDecision::Admit,
            QuoteVerdict::Reject(r) => JoinDecision::Deny(r.into()),
        }
    }

    /// Records an admitted node. Re-admitting an identical node is a no-op.
    pub fn admit_node(&mut self, info: NodeInfo) -> Result<Vec<GovRecord>, GovError> {
        if info.node_id != info.identity.fingerprint() {
            return Err(GovError::Unauthorized("node id does not match identity".into()));
        }
        if self.is_member_key(&info.identity) {
            return Err(GovError::Unauthorized("node identity is a member key".into()));
        }
        if self.nodes.get(&info.node_id) == Some(&info) {
            return Ok(Vec::new());
        }
        self.nodes.insert(info.node_id, info.clone());
        Ok(vec![GovRecord::NodeJoined(info)])
    }

    pub fn retire_node(&mut self, node_id: NodeId) -> Result<Vec<GovRecord>, GovError> {
        let n = self
            .nodes
            .get_mut(&node_id)
            .filter(|n| n.status == NodeStatus::Trusted)
            .ok_or_else(|| GovError::NotFound(format!("node {node_id}")))?;
        n.status = NodeStatus::Retired;
        Ok(vec![GovRecord::NodeRetired { node_id }])
    }

    /// Rebuilds state from the governance records of a ledger, in order.
    pub fn replay(records: &[GovRecord]) -> Result<GovState, ReplayError> {
        let err = |index, reason: String| ReplayError { index, reason };
        let Some(GovRecord::Genesis(g)) = records.first() else {
            return Err(err(0, "first record is not genesis".into()));
        };
        let (mut state, _) = GovState::genesis(g.clone()).map_err(|e| err(0, e.to_string()))?;
        let mut i = 1;
        while i < records.len() {
            let produced = match &records[i] {
                GovRecord::Proposal { proposal_id, proposer, action, signature } => {
                    let (id, out) = state
                        .submit_proposal(proposer, action.clone(), signature)
                        .map_err(|e| err(i, e.to_string()))?;
                    if id != *proposal_id {
                        return Err(err(i, format!("proposal id {proposal_id} replays as {id}")));
                    }
                    out
                }
                GovRecord::Ballot { proposal_id, member_id, ballot, signature } => {
                    state.vote(member_id, *proposal_id, *ballot, signature).map_err(|e| err(i, e.to_string()))?.1
                }
                GovRecord::NodeJoined(info) => state.admit_node(info.clone()).map_err(|e| err(i, e.to_string()))?,
                GovRecord::NodeRetired { node_id } => state.retire_node(*node_id).map_err(|e| err(i, e.to_string()))?,
                other => return Err(err(i, format!("unexpected derived record {other:?}"))),
            };
            if produced.is_empty() {
                return Err(err(i, "record had no effect on replay".into()));
            }
            let end = i + produced.len();
            if end > records.len() || records[i..end] != produced[..] {
                return Err(err(i, "derived records differ from the ledger".into()));
            }
            i = end;
        }
        Ok(state)
    }
}

/// Independently rechecks every Applied proposal against the ballots and
/// membership recorded before it. Returns how many were checked.
pub fn recheck_applied(records: &[GovRecord]) -> Result<usize, String> {
    let mut active: BTreeSet<MemberId> = BTreeSet::new();
    let mut rule = ResolveRule::STRICT_MAJORITY;
    let mut ballots: BTreeMap<ProposalId, BTreeMap<MemberId, Ballot>> = BTreeMap::new();
    let mut checked = 0;
    for r in records {
        match r {
            GovRecord::Genesis(g) => {
                active = g.members.iter().map(|m| m.member_id.clone()).collect();
                rule = g.constitution.resolve;
            }
            GovRecord::Ballot { proposal_id, member_id, ballot, .. } => {
                ballots.entry(*proposal_id).or_default().insert(member_id.clone(), *ballot);
            }
            GovRecord::Applied { proposal_id, effect } => {
                let yes = ballots
                    .get(proposal_id)
                    .map(|b| b.iter().filter(|(m, v)| **v == Ballot::Yes && active.contains(*m)).count())
                    .unwrap_or(0) as u64;
                if !rule.accepts(yes, active.len() as u64) {
                    return Err(format!("proposal {proposal_id} applied with {yes} of {} yes", active.len()));
                }
                checked += 1;
                match effect {
                    Effect::MemberAdded { member_id, .. } => {
                        active.insert(member_id.clone());
                    }
                    Effect::MemberRetired { member_id } => {
                        active.remove(member_id);
                    }
                    Effect::ConstitutionSet { constitution } => rule = constitution.resolve,
                    _ => {}
                }
            }
            _ => {}
        }
    }
    Ok(checked)
}
