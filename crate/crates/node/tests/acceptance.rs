//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. `ACCEPTANCE_ONLY=3,7` runs a subset.
//!
//! Every check below recomputes its expectation in this file instead of
//! trusting the library's own checkers.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use conledger_core::consensus::sim::record_fingerprint;
use conledger_core::consensus::{random_fault_scenario, run_simulation, RaftConfig, SimNetConfig, Trace, TraceEvent};
use conledger_core::crypto::KeyPair;
use conledger_core::enclave::{code_blob, measure, Platform};
use conledger_core::governance::{
    ballot_path, Action, ActionKind, Ballot, Effect, GovRecord, GovState, ResolveRule, RuleId, PROPOSALS_PATH,
};
use conledger_core::ledger::{
    audit, verify_receipt_bytes, ChainStatus, EntryKind, Ledger, LedgerConfig, Privacy,
};
use conledger_core::codec::Canonical;
use conledger_core::service::{open_envelope, FailPoint, Service, ServiceCommand, ServiceError, SignedRequest};
use conledger_core::settlement::{AppCommand, AppPolicy, DvpInstruction, SettlementState, TokenModel};
use conledger_core::testkit::{Consortium, Harness, PLATFORM_ID};
use conledger_node::bench::{self, Scenario, WorkloadMix};
use conledger_node::cluster::{enclave_config, LocalCluster};
use conledger_node::{storage, NodeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

type Criterion = fn() -> Outcome;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, Criterion); 11] = [
        (1, "consensus safety", c1_consensus_safety),
        (2, "consensus liveness", c2_consensus_liveness),
        (3, "receipt and tamper suite", c3_tamper),
        (4, "governance replay equivalence", c4_governance_replay),
        (5, "settlement invariants fuzz", c5_settlement_fuzz),
        (6, "dvp atomicity under crashes", c6_dvp_crashes),
        (7, "dual-model equivalence", c7_dual_model),
        (8, "privacy posture", c8_privacy),
        (9, "attestation gate", c9_attestation),
        (10, "performance", c10_performance),
        (11, "cli lifecycle", c11_lifecycle),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Outcome::new(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let tag = if out.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{n:>2}] {name}: {} ({:.1}s)", out.detail, t.elapsed().as_secs_f64());
        if !out.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}

fn scratch_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

// ---------------------------------------------------------------- consensus

const TRACES: u64 = 1000;
const MAX_TICKS: u64 = 50_000;

fn traces() -> &'static Vec<(u64, Trace, SimNetConfig)> {
    static CELL: std::sync::OnceLock<Vec<(u64, Trace, SimNetConfig)>> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        (0..TRACES)
            .map(|seed| {
                let (cfg, w) = random_fault_scenario(seed, 5, 100);
                (seed, run_simulation(5, &cfg, &w, MAX_TICKS), cfg)
            })
            .collect()
    })
}

/// Independent safety oracle over one trace.
fn trace_safety(t: &Trace) -> Result<(), String> {
    let mut leader_of: BTreeMap<u64, u64> = BTreeMap::new();
    for e in &t.events {
        if let TraceEvent::Elected { node, term, .. } = e {
            if *leader_of.entry(*term).or_insert(*node) != *node {
                return Err(format!("two leaders in term {term}"));
            }
        }
    }
    // what was applied at each index, by anyone
    let mut applied: BTreeMap<u64, (u64, u64, Option<u64>)> = BTreeMap::new();
    for e in &t.events {
        if let TraceEvent::Applied { index, term, fingerprint, command, .. } = e {
            let v = (*term, *fingerprint, *command);
            if *applied.entry(*index).or_insert(v) != v {
                return Err(format!("divergent entries applied at index {index}"));
            }
        }
        if let TraceEvent::Violation { what, .. } = e {
            return Err(format!("simulator flagged: {what}"));
        }
    }
    // state machines agree on the common prefix of what they applied
    for a in &t.nodes {
        for b in &t.nodes {
            let n = a.applied_commands.len().min(b.applied_commands.len());
            if a.applied_commands[..n] != b.applied_commands[..n] {
                return Err(format!("nodes {} and {} applied different command sequences", a.state.node_id, b.state.node_id));
            }
        }
    }
    // nothing committed was lost or rewritten
    for n in &t.nodes {
        for (index, (term, fp, _)) in applied.range(..=n.state.commit_index) {
            match n.state.log.get(*index as usize - 1) {
                Some(r) if r.term == *term && record_fingerprint(r) == *fp => {}
                _ => return Err(format!("node {} lost committed index {index}", n.state.node_id)),
            }
        }
    }
    let top = applied.keys().next_back().copied().unwrap_or(0);
    if t.nodes.iter().map(|n| n.state.commit_index).max().unwrap_or(0) < top {
        return Err(format!("no node still commits index {top}"));
    }
    Ok(())
}

fn c1_consensus_safety() -> Outcome {
    let t0 = Instant::now();
    let all = traces();
    let elapsed = t0.elapsed();
    let mut bad = Vec::new();
    let (mut partitions, mut crashes, mut max_drop) = (0, 0, 0f64);
    for (seed, t, cfg) in all {
        max_drop = max_drop.max(cfg.drop_probability);
        // one window per trace, cutting off a non-empty minority
        partitions += cfg.partitions.iter().filter(|p| !p.group.is_empty() && p.group.len() * 2 < 5).count();
        crashes += t.events.iter().filter(|e| matches!(e, TraceEvent::Crashed { .. })).count();
        if !t.completed {
            bad.push(format!("seed {seed}: ran out of ticks"));
        } else if let Err(e) = trace_safety(t) {
            bad.push(format!("seed {seed}: {e}"));
        }
    }
    let ok = bad.is_empty() && elapsed < Duration::from_secs(300) && partitions as u64 == TRACES && max_drop <= 0.2;
    Outcome::new(
        ok,
        format!(
            "{TRACES} traces, {crashes} crashes, {partitions} partition episodes, max drop {max_drop:.3}, {} unsafe, simulated in {:.1}s{}",
            bad.len(),
            elapsed.as_secs_f64(),
            bad.first().map(|b| format!("; first: {b}")).unwrap_or_default()
        ),
    )
}

fn c2_consensus_liveness() -> Outcome {
    let span = RaftConfig::default().election_timeout_max;
    let bound = 20 * span;
    let mut worst = 0;
    let mut bad = Vec::new();
    for (seed, t, _) in traces() {
        let Some(end) = t.faults_end else {
            bad.push(format!("seed {seed}: no fault window"));
            continue;
        };
        // everyone is restarted when faults end, so a majority is alive
        let before: BTreeSet<u64> = t
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Applied { tick, index, .. } if *tick < end => Some(*index),
                _ => None,
            })
            .collect();
        let first_new = t.events.iter().find_map(|e| match e {
            TraceEvent::Applied { tick, index, .. } if *tick >= end && !before.contains(index) => Some(*tick),
            _ => None,
        });
        match first_new {
            Some(at) if at - end <= bound => worst = worst.max(at - end),
            Some(at) => bad.push(format!("seed {seed}: first new commit {} ticks after faults", at - end)),
            None => bad.push(format!("seed {seed}: no new commit after faults")),
        }
    }
    Outcome::new(
        bad.is_empty(),
        format!(
            "worst first post-fault commit {worst} ticks, bound {bound} ticks (20 x {span}), {} violations{}",
            bad.len(),
            bad.first().map(|b| format!("; first: {b}")).unwrap_or_default()
        ),
    )
}

// ------------------------------------------------------------------ ledger

fn frame_offsets(buf: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < buf.len() {
        let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        out.push((pos, pos + 4 + len));
        pos += 4 + len;
    }
    out
}

fn c3_tamper() -> Outcome {
    let dir = scratch_dir("c3");
    let path = dir.join("ledger.bin");
    let key = KeyPair::from_seed([33; 32]);
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut l = Ledger::create(&path, LedgerConfig::default()).unwrap();
    l.set_signer(key.clone());
    while l.len() < 10_000 {
        let n = rng.gen_range(8..200);
        let payload: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
        l.append(EntryKind::App, Privacy::Public, &payload, None).unwrap();
    }
    l.sign_now().unwrap();
    l.flush().unwrap();
    let pk = key.public();
    let buf = std::fs::read(&path).unwrap();
    let clean = audit::verify_chain(&path, &pk).unwrap();
    let clean_ok = matches!(clean, ChainStatus::Ok { entries, .. } if entries == l.len());

    let frames = frame_offsets(&buf);
    let seqno_of = |byte: usize| frames.partition_point(|(_, end)| *end <= byte) as u64;
    let mut detected = 0;
    let mut misses = Vec::new();
    for _ in 0..1000 {
        let byte = rng.gen_range(0..buf.len());
        let bit = rng.gen_range(0..8);
        let mut b = buf.clone();
        b[byte] ^= 1 << bit;
        let want = seqno_of(byte);
        match audit::verify_chain_bytes(&b, &pk) {
            Ok(ChainStatus::FirstBadSeqno(s)) if s == want => detected += 1,
            other => misses.push(format!("byte {byte} bit {bit}: want seqno {want}, got {other:?}")),
        }
    }

    // receipts: every single-byte change to a receipt must be rejected
    let mut receipts_ok = true;
    let (mut mutations, mut rejected) = (0u64, 0u64);
    let mut first_accepted = None;
    for _ in 0..40 {
        let seqno = rng.gen_range(0..l.len());
        let r = l.get_receipt(seqno).unwrap().to_bytes();
        receipts_ok &= verify_receipt_bytes(&r, &pk);
        for i in 0..r.len() {
            let mut m = r.clone();
            m[i] ^= rng.gen_range(1..=255u8);
            mutations += 1;
            if verify_receipt_bytes(&m, &pk) {
                first_accepted.get_or_insert(format!("seqno {seqno} byte {i}"));
            } else {
                rejected += 1;
            }
        }
    }
    let ok = clean_ok && detected == 1000 && receipts_ok && rejected == mutations;
    Outcome::new(
        ok,
        format!(
            "clean chain {clean:?}; {detected}/1000 bit flips caught at the right seqno; honest receipts verify: {receipts_ok}; {rejected}/{mutations} receipt byte mutations rejected{}{}",
            misses.first().map(|m| format!("; miss: {m}")).unwrap_or_default(),
            first_accepted.map(|m| format!("; accepted: {m}")).unwrap_or_default()
        ),
    )
}

// -------------------------------------------------------------- governance

struct GovWorkload {
    c: Consortium,
    keys: BTreeMap<String, KeyPair>,
    next_member: u32,
    measurements: Vec<String>,
}

impl GovWorkload {
    fn random_action(&mut self, rng: &mut ChaCha20Rng, h: &Harness) -> Action {
        let gov = h.svc.gov().unwrap();
        let known: Vec<String> = self.keys.keys().cloned().collect();
        match rng.gen_range(0..100) {
            0..=24 => {
                let (id, key) = match rng.gen_range(0..10) {
                    0 => (known[rng.gen_range(0..known.len())].clone(), KeyPair::generate(rng)),
                    1 => ("bad id!".to_string(), KeyPair::generate(rng)),
                    _ => {
                        self.next_member += 1;
                        (format!("m{}", self.next_member), KeyPair::generate(rng))
                    }
                };
                let public_key = if rng.gen_range(0..10) == 0 {
                    self.keys[&known[rng.gen_range(0..known.len())]].public()
                } else {
                    self.keys.entry(id.clone()).or_insert(key).public()
                };
                Action::AddMember { member_id: id, public_key }
            }
            25..=39 => {
                let id = if rng.gen_range(0..8) == 0 { "ghost".to_string() } else { known[rng.gen_range(0..known.len())].clone() };
                Action::RetireMember { member_id: id }
            }
            40..=54 => Action::AddTrustedMeasurement { measurement: self.measurements[rng.gen_range(0..self.measurements.len())].clone() },
            55..=64 => Action::RemoveTrustedMeasurement { measurement: self.measurements[rng.gen_range(0..self.measurements.len())].clone() },
            65..=72 => Action::TransitionServiceToOpen,
            73..=89 => {
                let denominator = rng.gen_range(1..=5);
                let numerator = rng.gen_range(0..=denominator);
                let mut validate_rules: Vec<RuleId> = RuleId::ALL.to_vec();
                if rng.gen_range(0..4) == 0 {
                    validate_rules.retain(|_| rng.gen_bool(0.8));
                }
                let mut enabled_actions: BTreeSet<ActionKind> = ActionKind::ALL.into_iter().collect();
                if rng.gen_range(0..4) == 0 {
                    enabled_actions.remove(&ActionKind::ALL[rng.gen_range(0..ActionKind::ALL.len())]);
                }
                // keep SetConstitution reachable most of the time so workloads stay varied
                if gov.constitution.version > 3 && rng.gen_bool(0.5) {
                    enabled_actions.insert(ActionKind::SetConstitution);
                }
                Action::SetConstitution { resolve: ResolveRule { numerator, denominator }, validate_rules, enabled_actions }
            }
            _ => {
                let policy = if rng.gen_bool(0.8) { self.c.policy(TokenModel::Account) } else { json!(["not", "an", "object"]) };
                Action::RegisterAppPolicy { policy }
            }
        }
    }

    fn random_command(&mut self, rng: &mut ChaCha20Rng, h: &Harness) -> ServiceCommand {
        let gov = h.svc.gov().unwrap();
        let known: Vec<String> = self.keys.keys().cloned().collect();
        let active: Vec<String> = gov.active_members().map(|m| m.member_id.clone()).filter(|m| self.keys.contains_key(m)).collect();
        let pending: Vec<u64> = gov
            .proposals
            .values()
            .filter(|p| p.state == conledger_core::governance::ProposalState::Pending)
            .map(|p| p.proposal_id)
            .collect();
        let pick = |rng: &mut ChaCha20Rng, v: &[String]| v[rng.gen_range(0..v.len())].clone();
        let roll = rng.gen_range(0..100);
        let mut request = if roll < 55 && !pending.is_empty() {
            let pid = if rng.gen_range(0..10) == 0 { rng.gen_range(0..gov.next_proposal_id + 2) } else { pending[rng.gen_range(0..pending.len())] };
            let voter = if active.is_empty() || rng.gen_range(0..10) == 0 { pick(rng, &known) } else { pick(rng, &active) };
            let ballot = if rng.gen_bool(0.7) { Ballot::Yes } else { Ballot::No };
            SignedRequest::sign(ballot_path(pid), json!({ "ballot": ballot }), voter.clone(), &self.keys[&voter])
        } else if roll < 95 {
            let proposer = if active.is_empty() || rng.gen_range(0..10) == 0 { pick(rng, &known) } else { pick(rng, &active) };
            let action = self.random_action(rng, h);
            SignedRequest::sign(PROPOSALS_PATH, json!({ "action": action }), proposer.clone(), &self.keys[&proposer])
        } else {
            let node_key = KeyPair::generate(rng);
            let rogue;
            let platform = if rng.gen_bool(0.5) {
                &self.c.platform
            } else {
                rogue = Platform::generate(PLATFORM_ID, rng);
                &rogue
            };
            let m = if rng.gen_bool(0.5) { self.c.measurement } else { measure(&code_blob(b"other", "x")) };
            return ServiceCommand::Join { join: self.c.join_request(&node_key, platform, m, 7100) };
        };
        if rng.gen_range(0..25) == 0 {
            request.body["tampered"] = json!(true);
        }
        ServiceCommand::Request { request }
    }
}

/// Checks every Applied record against the ballots and membership that
/// precede it in the ledger.
fn applied_meet_resolve_rule(records: &[GovRecord]) -> Result<usize, String> {
    let mut active: BTreeSet<String> = BTreeSet::new();
    let (mut num, mut den) = (1u128, 2u128);
    let mut ballots: BTreeMap<u64, BTreeMap<String, Ballot>> = BTreeMap::new();
    let mut applied = 0;
    for r in records {
        match r {
            GovRecord::Genesis(g) => {
                active = g.members.iter().map(|m| m.member_id.clone()).collect();
                (num, den) = (g.constitution.resolve.numerator as u128, g.constitution.resolve.denominator as u128);
            }
            GovRecord::Ballot { proposal_id, member_id, ballot, .. } => {
                ballots.entry(*proposal_id).or_default().insert(member_id.clone(), *ballot);
            }
            GovRecord::Applied { proposal_id, effect } => {
                let yes = ballots
                    .get(proposal_id)
                    .map_or(0, |b| b.iter().filter(|(m, v)| **v == Ballot::Yes && active.contains(*m)).count()) as u128;
                // yes / active must exceed num / den
                if yes * den <= num * active.len() as u128 {
                    return Err(format!("proposal {proposal_id} applied with {yes} yes of {} active at {num}/{den}", active.len()));
                }
                applied += 1;
                match effect {
                    Effect::MemberAdded { member_id, .. } => {
                        active.insert(member_id.clone());
                    }
                    Effect::MemberRetired { member_id } => {
                        active.remove(member_id);
                    }
                    Effect::ConstitutionSet { constitution } => {
                        (num, den) = (constitution.resolve.numerator as u128, constitution.resolve.denominator as u128);
                    }
                    _ => {}
                }
            }
            _ => {}
        }
    }
    Ok(applied)
}

fn gov_records(l: &Ledger) -> Vec<GovRecord> {
    l.entries()
        .iter()
        .filter(|e| e.kind == EntryKind::Governance)
        .map(|e| {
            let (_, _, body) = open_envelope(&e.payload).expect("enveloped");
            GovRecord::from_payload(body).expect("governance record")
        })
        .collect()
}

fn c4_governance_replay() -> Outcome {
    let dir = scratch_dir("c4");
    let mut failures = Vec::new();
    let (mut applied_total, mut records_total, mut actions_total) = (0, 0, 0);
    for w in 0..100u64 {
        let c = Consortium::new(4000 + w, w % 2 == 0);
        let path = dir.join(format!("gov-{w}.bin"));
        let mut h = Harness::new(Service::create(Some(&path), c.secrets.clone()).unwrap());
        h.apply(&ServiceCommand::Genesis { genesis: c.genesis() }).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(w);
        let mut wl = GovWorkload {
            keys: c.members.iter().map(|(id, k)| (id.clone(), k.clone())).collect(),
            next_member: 0,
            measurements: (0..4).map(|i| hex::encode([i as u8 + 1; 32])).chain(["zz".to_string()]).collect(),
            c,
        };
        for _ in 0..200 {
            let cmd = wl.random_command(&mut rng, &h);
            if let Err(e) = h.apply(&cmd) {
                failures.push(format!("workload {w}: apply failed: {e}"));
                break;
            }
            if rng.gen_range(0..20) == 0 {
                h.apply(&ServiceCommand::Sign).unwrap();
            }
            actions_total += 1;
        }
        let live: GovState = h.svc.gov().unwrap().clone();
        h.svc.flush().unwrap();
        drop(h);

        let (svc, _) = match Service::open(&path, wl.c.secrets.clone()) {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("workload {w}: reopen failed: {e}"));
                continue;
            }
        };
        if svc.gov() != Some(&live) {
            failures.push(format!("workload {w}: reopened state differs from live state"));
        }
        let records = gov_records(svc.ledger());
        records_total += records.len();
        match GovState::replay(&records) {
            Ok(s) if s == live => {}
            Ok(_) => failures.push(format!("workload {w}: replayed records differ from live state")),
            Err(e) => failures.push(format!("workload {w}: replay failed: {e:?}")),
        }
        match applied_meet_resolve_rule(&records) {
            Ok(n) => applied_total += n,
            Err(e) => failures.push(format!("workload {w}: {e}")),
        }
    }
    Outcome::new(
        failures.is_empty() && applied_total > 0,
        format!(
            "100 workloads, {actions_total} actions, {records_total} governance records, {applied_total} applied proposals rechecked, {} mismatches{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

// -------------------------------------------------------------- settlement

const CB: &str = "cb";
const BANKS: [&str; 2] = ["bankA", "bankB"];
const CLIENTS: [(&str, &str); 2] = [("client1", "bankA"), ("client2", "bankB")];
const PARTIES: [&str; 5] = ["cb", "bankA", "bankB", "client1", "client2"];

fn policy(model: TokenModel) -> AppPolicy {
    let c = Consortium::new(0, true);
    AppPolicy { model, parties: c.parties.iter().map(|(p, _)| p.clone()).collect() }
}

/// A command, who signs it, and whether those signers are the right ones.
struct Op {
    signer: String,
    cosigner: Option<String>,
    cmd: AppCommand,
    authorized: bool,
}

struct OpGen {
    assets: Vec<String>,
    dvps: u64,
}

impl OpGen {
    fn new() -> Self {
        OpGen { assets: Vec::new(), dvps: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha20Rng) -> Op {
        let bank = |rng: &mut ChaCha20Rng| BANKS[rng.gen_range(0..2)].to_string();
        let amount = |rng: &mut ChaCha20Rng, max: u64| if rng.gen_range(0..50) == 0 { 0 } else { rng.gen_range(1..=max) };
        let op = |signer: &str, cmd| Op { signer: signer.into(), cosigner: None, cmd, authorized: true };
        let mut o = match rng.gen_range(0..100) {
            0..=14 => op(CB, AppCommand::Mint { to: bank(rng), amount: amount(rng, 5_000) }),
            15..=21 => {
                let from = bank(rng);
                Op { signer: from.clone(), cosigner: Some(CB.into()), cmd: AppCommand::Redeem { from, amount: amount(rng, 2_000) }, authorized: true }
            }
            22..=46 => {
                let from = bank(rng);
                let to = if from == "bankA" { "bankB" } else { "bankA" };
                op(&from.clone(), AppCommand::Transfer { from, to: to.into(), amount: amount(rng, 3_000) })
            }
            47..=61 => {
                let (client, i) = CLIENTS[rng.gen_range(0..2)];
                op(i, AppCommand::IssueClaim { intermediary: i.into(), client: client.into(), amount: amount(rng, 2_000) })
            }
            62..=71 => {
                let (client, i) = CLIENTS[rng.gen_range(0..2)];
                op(i, AppCommand::RetireClaim { intermediary: i.into(), client: client.into(), amount: amount(rng, 2_000) })
            }
            72..=77 => {
                let asset_id = if !self.assets.is_empty() && rng.gen_range(0..5) == 0 {
                    self.assets[rng.gen_range(0..self.assets.len())].clone()
                } else {
                    format!("A{}", self.assets.len())
                };
                if !self.assets.contains(&asset_id) {
                    self.assets.push(asset_id.clone());
                }
                let issuer = if rng.gen_bool(0.3) { CB.to_string() } else { bank(rng) };
                op(&issuer, AppCommand::RegisterAsset { asset_id, quantity: amount(rng, 1_000), initial_holder: bank(rng) })
            }
            _ => {
                let seller = bank(rng);
                let buyer = if seller == "bankA" { "bankB" } else { "bankA" }.to_string();
                let asset_id = if self.assets.is_empty() { "A0".to_string() } else { self.assets[rng.gen_range(0..self.assets.len())].clone() };
                self.dvps += 1;
                let instruction_id = if self.dvps > 1 && rng.gen_range(0..20) == 0 { format!("d{}", self.dvps - 1) } else { format!("d{}", self.dvps) };
                let d = DvpInstruction {
                    instruction_id,
                    seller: seller.clone(),
                    buyer: buyer.clone(),
                    asset_id,
                    quantity: amount(rng, 300),
                    price: amount(rng, 3_000),
                    privacy: Privacy::Public,
                };
                let (s, co) = if rng.gen_bool(0.5) { (seller, buyer) } else { (buyer, seller) };
                Op { signer: s, cosigner: Some(co), cmd: AppCommand::Dvp(d), authorized: true }
            }
        };
        // a few wrong-signer attempts
        if rng.gen_range(0..25) == 0 {
            o.signer = PARTIES[rng.gen_range(0..PARTIES.len())].to_string();
            o.cosigner = None;
            o.authorized = match &o.cmd {
                AppCommand::Mint { .. } => o.signer == CB,
                AppCommand::Transfer { from, .. } => o.signer == *from,
                AppCommand::IssueClaim { intermediary, .. } | AppCommand::RetireClaim { intermediary, .. } => o.signer == *intermediary,
                AppCommand::RegisterAsset { .. } => o.signer == CB || BANKS.contains(&o.signer.as_str()),
                AppCommand::Redeem { .. } | AppCommand::Dvp(_) => false,
            };
        }
        o
    }
}

/// Everything observable about balances, claims and assets.
#[derive(Debug, Clone, Default, PartialEq)]
struct View {
    cash: BTreeMap<String, u64>,
    claims: BTreeMap<(String, String), u64>,
    assets: BTreeMap<(String, String), u64>,
}

fn observe(s: &SettlementState, assets: &[String]) -> View {
    let mut v = View::default();
    for p in PARTIES {
        v.cash.insert(p.into(), s.holding(p));
        for a in assets {
            let h = s.asset_holding(a, p);
            if h > 0 {
                v.assets.insert((a.clone(), p.into()), h);
            }
        }
    }
    for i in BANKS {
        for (c, _) in CLIENTS {
            let x = s.claim(i, c);
            if x > 0 {
                v.claims.insert((i.into(), c.into()), x);
            }
        }
    }
    v
}

/// Reference semantics for the settlement application.
#[derive(Default)]
struct Model {
    view: View,
    minted: u64,
    redeemed: u64,
    quantities: BTreeMap<String, u64>,
    settled: BTreeSet<String>,
}

enum Expect {
    Ok,
    Err,
    DvpSettled,
    DvpFailed,
}

impl Model {
    fn cash(&self, p: &str) -> u64 {
        self.view.cash.get(p).copied().unwrap_or(0)
    }

    fn claims_of(&self, i: &str) -> u64 {
        self.view.claims.iter().filter(|((x, _), _)| x == i).map(|(_, v)| v).sum()
    }

    fn can_pay(&self, p: &str, amount: u64) -> bool {
        self.cash(p) >= amount && self.cash(p) - amount >= self.claims_of(p)
    }

    fn add(map: &mut BTreeMap<(String, String), u64>, k: (String, String), delta: i128) {
        let v = map.get(&k).copied().unwrap_or(0) as i128 + delta;
        if v == 0 {
            map.remove(&k);
        } else {
            map.insert(k, v as u64);
        }
    }

    fn move_cash(&mut self, from: Option<&str>, to: Option<&str>, amount: u64) {
        if let Some(f) = from {
            *self.view.cash.get_mut(f).unwrap() -= amount;
        }
        if let Some(t) = to {
            *self.view.cash.get_mut(t).unwrap() += amount;
        }
    }

    /// Predicts the outcome and, when it succeeds, applies it.
    fn step(&mut self, op: &Op) -> Expect {
        if !op.authorized {
            return Expect::Err;
        }
        match &op.cmd {
            AppCommand::Mint { to, amount } => {
                if *amount == 0 {
                    return Expect::Err;
                }
                self.move_cash(None, Some(to), *amount);
                self.minted += amount;
            }
            AppCommand::Redeem { from, amount } => {
                if *amount == 0 || !self.can_pay(from, *amount) {
                    return Expect::Err;
                }
                self.move_cash(Some(from), None, *amount);
                self.redeemed += amount;
            }
            AppCommand::Transfer { from, to, amount } => {
                if *amount == 0 || !self.can_pay(from, *amount) {
                    return Expect::Err;
                }
                self.move_cash(Some(from), Some(to), *amount);
            }
            AppCommand::IssueClaim { intermediary, client, amount } => {
                if *amount == 0 || self.claims_of(intermediary) + amount > self.cash(intermediary) {
                    return Expect::Err;
                }
                Self::add(&mut self.view.claims, (intermediary.clone(), client.clone()), *amount as i128);
            }
            AppCommand::RetireClaim { intermediary, client, amount } => {
                let have = self.view.claims.get(&(intermediary.clone(), client.clone())).copied().unwrap_or(0);
                if *amount == 0 || have < *amount {
                    return Expect::Err;
                }
                Self::add(&mut self.view.claims, (intermediary.clone(), client.clone()), -(*amount as i128));
            }
            AppCommand::RegisterAsset { asset_id, quantity, initial_holder } => {
                if *quantity == 0 || self.quantities.contains_key(asset_id) {
                    return Expect::Err;
                }
                self.quantities.insert(asset_id.clone(), *quantity);
                self.view.assets.insert((asset_id.clone(), initial_holder.clone()), *quantity);
            }
            AppCommand::Dvp(d) => {
                if d.quantity == 0 || d.price == 0 || !self.quantities.contains_key(&d.asset_id) || self.settled.contains(&d.instruction_id) {
                    return Expect::Err;
                }
                let have = self.view.assets.get(&(d.asset_id.clone(), d.seller.clone())).copied().unwrap_or(0);
                if have < d.quantity || !self.can_pay(&d.buyer, d.price) {
                    return Expect::DvpFailed;
                }
                Self::add(&mut self.view.assets, (d.asset_id.clone(), d.seller.clone()), -(d.quantity as i128));
                Self::add(&mut self.view.assets, (d.asset_id.clone(), d.buyer.clone()), d.quantity as i128);
                self.move_cash(Some(&d.buyer), Some(&d.seller), d.price);
                self.settled.insert(d.instruction_id.clone());
                return Expect::DvpSettled;
            }
        }
        Expect::Ok
    }

    fn invariants(&self, v: &View) -> Result<(), String> {
        let held: u64 = v.cash.values().sum();
        if held != self.minted - self.redeemed {
            return Err(format!("conservation: holdings {held} != minted {} - redeemed {}", self.minted, self.redeemed));
        }
        for i in BANKS {
            let claims: u64 = v.claims.iter().filter(|((x, _), _)| x == i).map(|(_, a)| a).sum();
            if claims > v.cash.get(i).copied().unwrap_or(0) {
                return Err(format!("backing: {i} claims {claims} exceed holding"));
            }
        }
        for (a, q) in &self.quantities {
            let sum: u64 = v.assets.iter().filter(|((x, _), _)| x == a).map(|(_, h)| h).sum();
            if sum != *q {
                return Err(format!("asset {a}: holdings {sum} != quantity {q}"));
            }
        }
        Ok(())
    }
}

fn fresh_view() -> View {
    View { cash: PARTIES.iter().map(|p| (p.to_string(), 0)).collect(), ..View::default() }
}

fn c5_settlement_fuzz() -> Outcome {
    let mut failures = Vec::new();
    let mut outcomes = BTreeMap::<&str, u64>::new();
    let mut ops_total = 0;
    for (seed, model) in [(51, TokenModel::Account), (52, TokenModel::Utxo), (53, TokenModel::Account), (54, TokenModel::Utxo)] {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut s = SettlementState::new(policy(model));
        let mut m = Model { view: fresh_view(), ..Model::default() };
        let mut gen = OpGen::new();
        for k in 0..10_000 {
            let op = gen.next(&mut rng);
            let expect = m.step(&op);
            let got = s.execute(&op.signer, op.cosigner.as_deref(), &op.cmd);
            let agrees = match (&expect, &got) {
                (Expect::Ok, Ok(_)) | (Expect::Err, Err(_)) => true,
                (Expect::DvpSettled, Ok(v)) => v["outcome"] == "settled",
                (Expect::DvpFailed, Ok(v)) => v["outcome"] == "failed",
                _ => false,
            };
            *outcomes.entry(if got.is_ok() { "accepted" } else { "rejected" }).or_default() += 1;
            ops_total += 1;
            let v = observe(&s, &gen.assets);
            let err = if !agrees {
                Some(format!("outcome {got:?} not predicted"))
            } else if v != m.view {
                Some("state differs from reference model".into())
            } else {
                m.invariants(&v).err().or_else(|| s.check_invariants().err())
            };
            if let Some(e) = err {
                failures.push(format!("seed {seed} op {k} {:?}: {e}", op.cmd));
                break;
            }
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{ops_total} ops over 4 sequences (both models), {} accepted / {} rejected, invariants checked after every op{}",
            outcomes.get("accepted").unwrap_or(&0),
            outcomes.get("rejected").unwrap_or(&0),
            failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default()
        ),
    )
}

fn c7_dual_model() -> Outcome {
    let mut failures = Vec::new();
    let (mut valid, mut skipped) = (0u64, 0u64);
    for seq in 0..1000u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(70_000 + seq);
        let mut acct = SettlementState::new(policy(TokenModel::Account));
        let mut utxo = SettlementState::new(policy(TokenModel::Utxo));
        let mut gen = OpGen::new();
        for _ in 0..rng.gen_range(20..80) {
            let op = gen.next(&mut rng);
            let (mut a2, mut u2) = (acct.clone(), utxo.clone());
            let ra = a2.execute(&op.signer, op.cosigner.as_deref(), &op.cmd);
            let ru = u2.execute(&op.signer, op.cosigner.as_deref(), &op.cmd);
            match (&ra, &ru) {
                (Ok(x), Ok(y)) if x == y => {
                    (acct, utxo) = (a2, u2);
                    valid += 1;
                }
                (Err(x), Err(y)) if x == y => skipped += 1,
                _ => {
                    failures.push(format!("sequence {seq}: models disagree on {:?}: {ra:?} vs {ru:?}", op.cmd));
                    break;
                }
            }
        }
        if observe(&acct, &gen.assets) != observe(&utxo, &gen.assets) {
            failures.push(format!("sequence {seq}: final totals differ"));
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "1000 sequences, {valid} ops valid under both models ({skipped} invalid under both dropped), {} divergences{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

// --------------------------------------------------------- crash recovery

fn c6_dvp_crashes() -> Outcome {
    let dir = scratch_dir("c6");
    let points = [
        Some(FailPoint::DvpValidated),
        Some(FailPoint::DvpAssetLegApplied),
        Some(FailPoint::DvpCashLegApplied),
        Some(FailPoint::MidGroup),
        Some(FailPoint::BeforeFlush),
        Some(FailPoint::AfterFlush),
        None,
    ];
    let mut failures = Vec::new();
    let (mut neither, mut both) = (0, 0);
    for seed in 0..200u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(600 + seed);
        let model = if seed % 2 == 0 { TokenModel::Account } else { TokenModel::Utxo };
        let c = Consortium::new(seed, seed % 3 != 0);
        let path = dir.join(format!("dvp-{seed}.bin"));
        let _ = std::fs::remove_file(&path);
        let mut h = Harness::new(Service::create(Some(&path), c.secrets.clone()).unwrap());
        for cmd in c.bootstrap(model) {
            h.apply(&cmd).unwrap();
        }
        let req = |h: &mut Harness, r: SignedRequest| h.request(r).unwrap().response;
        for b in BANKS {
            req(&mut h, c.app(CB, "/app/mint", json!({ "to": b, "amount": rng.gen_range(1_000..10_000) })));
        }
        for _ in 0..rng.gen_range(0..15) {
            let (from, to) = if rng.gen_bool(0.5) { ("bankA", "bankB") } else { ("bankB", "bankA") };
            req(&mut h, c.app(from, "/app/transfer", json!({ "from": from, "to": to, "amount": rng.gen_range(1..500) })));
            if rng.gen_bool(0.3) {
                let (client, i) = CLIENTS[rng.gen_range(0..2)];
                req(&mut h, c.app(i, "/app/issue-claim", json!({ "intermediary": i, "client": client, "amount": rng.gen_range(1..300) })));
            }
        }
        let seller = BANKS[rng.gen_range(0..2)];
        let buyer = if seller == "bankA" { "bankB" } else { "bankA" };
        req(&mut h, c.app(CB, "/app/mint", json!({ "to": buyer, "amount": 1_000 })));
        let asset = format!("BOND-{seed}");
        req(&mut h, c.app(seller, "/app/register-asset", json!({ "asset_id": asset, "quantity": 1_000, "initial_holder": seller })));
        let app = h.svc.app().unwrap();
        let free = app.holding(buyer) - app.claims_of(buyer);
        let (qty, price) = (rng.gen_range(1..=1_000u64), rng.gen_range(1..=free.max(1)));
        let before = (app.asset_holding(&asset, buyer), app.holding(seller), app.holding(buyer));
        let privacy = if rng.gen_bool(0.5) { "private" } else { "public" };
        let body = json!({ "instruction_id": format!("i-{seed}"), "seller": seller, "buyer": buyer, "asset_id": asset, "quantity": qty, "price": price, "privacy": privacy });
        let dvp = c.app_cosigned(buyer, seller, "/app/dvp", body);
        if rng.gen_bool(0.3) {
            h.apply(&ServiceCommand::Sign).unwrap();
        }
        h.svc.flush().unwrap();
        let point = points[(seed % points.len() as u64) as usize];
        if let Some(p) = point {
            h.svc.set_fail_point(h.next_index, p);
        }
        match h.request(dvp.clone()) {
            Err(ServiceError::Crashed(_)) | Ok(_) => {}
            Err(e) => {
                failures.push(format!("seed {seed}: {e}"));
                continue;
            }
        }
        // a crash loses whatever was not flushed
        h.svc.crash();

        let (svc, _) = match Service::open(&path, c.secrets.clone()) {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("seed {seed}: recovery failed: {e}"));
                continue;
            }
        };
        let app = svc.app().unwrap();
        let asset_leg = app.asset_holding(&asset, buyer) == before.0 + qty;
        let cash_leg = app.holding(seller) == before.1 + price && app.holding(buyer) == before.2 - price;
        let untouched = app.asset_holding(&asset, buyer) == before.0 && app.holding(seller) == before.1 && app.holding(buyer) == before.2;
        if asset_leg != cash_leg || (!asset_leg && !untouched) {
            failures.push(format!("seed {seed} {point:?}: asset leg {asset_leg}, cash leg {cash_leg}"));
            continue;
        }
        if let Err(e) = app.check_invariants() {
            failures.push(format!("seed {seed}: {e}"));
            continue;
        }
        if asset_leg {
            both += 1;
        } else {
            neither += 1;
        }
        // resubmitting settles exactly once
        let mut h = Harness::new(svc);
        let r = h.request(dvp).unwrap().response;
        let app = h.svc.app().unwrap();
        let settled_once = app.asset_holding(&asset, buyer) == before.0 + qty && app.holding(seller) == before.1 + price;
        let expected_status = if asset_leg { 409 } else { 200 };
        if !settled_once || r.status != expected_status {
            failures.push(format!("seed {seed}: resubmission gave {} and settled_once={settled_once}", r.status));
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "200 crash points: {neither} recovered with neither leg, {both} with both, {} with one leg or bad recovery{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

// ------------------------------------------------------------------ cluster

const SENTINEL: &[u8; 16] = b"SENTINEL-c8-5e2d";

fn c8_privacy() -> Outcome {
    let root = scratch_dir("c8");
    let seed = 8;
    let mut cl = LocalCluster::start(&root, seed, true, 3).unwrap();
    cl.join().unwrap();
    cl.join().unwrap();
    cl.open(TokenModel::Utxo).unwrap();
    let c = Consortium::new(seed, true);
    let memo = std::str::from_utf8(SENTINEL).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let must = |r: std::io::Result<conledger_core::service::Response>| {
        let r = r.unwrap();
        assert!(r.is_ok(), "{r:?}");
        r
    };
    must(cl.request(&c.app(CB, "/app/mint", json!({ "to": "bankA", "amount": 1_000_000, "privacy": "private", "memo": memo }))));
    must(cl.request(&c.app(CB, "/app/mint", json!({ "to": "bankB", "amount": 1_000_000, "privacy": "private", "memo": memo }))));
    must(cl.request(&c.app("bankA", "/app/register-asset", json!({ "asset_id": "GILT", "quantity": 10_000, "initial_holder": "bankA", "privacy": "private", "memo": memo }))));
    let mut private = Vec::new();
    for k in 0..60 {
        let r = match k % 3 {
            0 => c.app("bankA", "/app/transfer", json!({ "from": "bankA", "to": "bankB", "amount": rng.gen_range(1..100), "privacy": "private", "memo": memo })),
            1 => c.app("bankB", "/app/issue-claim", json!({ "intermediary": "bankB", "client": "client2", "amount": rng.gen_range(1..50), "privacy": "private", "memo": memo })),
            _ => c.app_cosigned("bankA", "bankB", "/app/dvp", json!({ "instruction_id": format!("p{k}"), "seller": "bankA", "buyer": "bankB", "asset_id": "GILT", "quantity": 1, "price": 10, "privacy": "private", "memo": memo })),
        };
        private.push((must(cl.request(&r)).seqno.unwrap(), if k % 3 == 1 { "bankB" } else { "bankA" }));
    }
    let leader = cl.leader().unwrap();
    let applied = cl.status(leader).unwrap()["applied_index"].as_u64().unwrap();
    cl.wait_applied(applied, Duration::from_secs(20));

    // every operator identity, against every node, for every private entry
    let (mut tried, mut denied, mut party_ok) = (0, 0, 0);
    let ops: Vec<(u64, KeyPair)> = (0..3)
        .map(|i| {
            let n = cl.node(i).unwrap();
            (n.node_id, storage::load_key(&storage::DataDir(n.data_dir.clone()).node_key()).unwrap())
        })
        .collect();
    for (seqno, party) in &private {
        for i in 0..3 {
            let node = cl.node(i).unwrap();
            for (id, key) in &ops {
                let r = node.request(SignedRequest::sign(format!("/app/tx/{seqno}"), json!({}), format!("node:{id}"), key));
                tried += 1;
                denied += (r.status == 403) as u64;
            }
        }
        party_ok += cl.node(leader).unwrap().request(c.app(party, &format!("/app/tx/{seqno}"), json!({}))).is_ok() as u64;
    }
    cl.shutdown();
    let hits = bench::files_containing(&root, SENTINEL).unwrap();
    let files = walk(&root);
    Outcome::new(
        hits.is_empty() && tried > 0 && denied == tried && party_ok == private.len() as u64,
        format!(
            "sentinel in {} of {files} persisted files after {} private writes; operator reads denied {denied}/{tried}; entitled parties still read {party_ok}/{}{}",
            hits.len(),
            private.len() + 3,
            private.len(),
            hits.first().map(|h| format!("; found in {h}")).unwrap_or_default()
        ),
    )
}

fn walk(root: &Path) -> usize {
    let mut n = 0;
    for e in std::fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        n += if p.is_dir() { walk(&p) } else { 1 };
    }
    n
}

fn gov_nodes(cl: &LocalCluster) -> usize {
    let r = cl.request(&SignedRequest::anonymous("/gov/service", json!({}))).unwrap();
    r.body["nodes"].as_array().map_or(0, Vec::len)
}

fn voters(cl: &LocalCluster) -> usize {
    cl.status(cl.leader().unwrap_or(0)).and_then(|s| s["voters"].as_array().map(Vec::len)).unwrap_or(0)
}

fn c9_attestation() -> Outcome {
    let root = scratch_dir("c9");
    let mut cl = LocalCluster::start(&root, 9, true, 3).unwrap();
    let mut trusted_admitted = 0;
    for _ in 0..2 {
        trusted_admitted += cl.join().is_ok() as u32;
    }
    cl.open(TokenModel::Account).unwrap();
    let (voters0, nodes0) = (voters(&cl), gov_nodes(&cl));
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let mut reasons = BTreeMap::<String, u32>::new();
    let mut admitted = 0;
    for k in 0..100 {
        let mut enclave = enclave_config(&root);
        match rng.gen_range(0..3) {
            0 => {
                let blob: Vec<u8> = (0..rng.gen_range(16..256)).map(|_| rng.gen()).collect();
                enclave.code_blob_path = root.join("untrusted.blob");
                std::fs::write(&enclave.code_blob_path, blob).unwrap();
            }
            1 => {
                // right platform id, wrong key
                enclave.platform_path = root.join("rogue.json");
                storage::save_platform(&enclave.platform_path, &Platform::generate(PLATFORM_ID, &mut rng)).unwrap();
            }
            _ => {
                let id = format!("emu-rogue-{k}");
                enclave.platform_id = id.clone();
                enclave.platform_path = root.join("rogue.json");
                storage::save_platform(&enclave.platform_path, &Platform::generate(id, &mut rng)).unwrap();
            }
        }
        // fresh identity for each attempt
        let _ = std::fs::remove_dir_all(root.join(format!("n{}", cl.configs.len())));
        match cl.join_with(enclave) {
            Err(NodeError::JoinDenied { reason }) => *reasons.entry(reason).or_default() += 1,
            Err(e) => *reasons.entry(format!("error: {e}")).or_default() += 1,
            Ok(i) => {
                admitted += 1;
                let _ = cl.stop(i);
            }
        }
    }
    let unchanged = voters(&cl) == voters0 && gov_nodes(&cl) == nodes0;
    let _ = std::fs::remove_dir_all(root.join(format!("n{}", cl.configs.len())));
    let late = cl.join().is_ok();
    trusted_admitted += late as u32;
    let grew = cl.wait_for(|| voters(&cl) == voters0 + 1, Duration::from_secs(10));
    cl.shutdown();
    let denied: u32 = reasons.iter().filter(|(r, _)| !r.starts_with("error")).map(|(_, n)| n).sum();
    Outcome::new(
        denied == 100 && admitted == 0 && unchanged && trusted_admitted == 3 && voters0 == 3 && grew,
        format!("untrusted joins denied {denied}/100 {reasons:?}; membership unchanged: {unchanged}; trusted joins admitted {trusted_admitted}/3"),
    )
}

fn perf_scenario(name: &str, confidential: bool) -> Scenario {
    Scenario {
        name: name.into(),
        cluster_size: 3,
        confidential_mode: confidential,
        workload_mix: WorkloadMix::transfers_only(),
        privacy_fraction: 0.5,
        target_rate: None,
        duration_secs: 30.0,
        seed: 10,
        max_ops: None,
        clients: 32,
        probes: false,
    }
}

fn c10_performance() -> Outcome {
    let work = scratch_dir("c10");
    let scenarios = [perf_scenario("perf-confidential-on", true), perf_scenario("perf-confidential-off", false)];
    let suite = match bench::run_suite(&scenarios, &work) {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, format!("bench failed: {e}")),
    };
    let out = work.join("report");
    bench::write_reports(&suite, &out).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (s, r) in scenarios.iter().zip(&suite.reports) {
        let Some(r) = r else {
            pass = false;
            parts.push(format!("{}: no report", s.name));
            continue;
        };
        pass &= r.error_count == 0 && r.chain_ok && r.elapsed_secs >= 30.0;
        if s.confidential_mode {
            pass &= r.achieved_tps >= 1000.0 && r.latency_p99_ms < 250.0;
        }
        parts.push(format!(
            "{}: {:.0} ops/s over {:.1}s, p50 {:.1} ms, p99 {:.1} ms, errors {}",
            s.name, r.achieved_tps, r.elapsed_secs, r.latency_p50_ms, r.latency_p99_ms, r.error_count
        ));
    }
    parts.push(format!("csv at {}", out.join("report.csv").display()));
    Outcome::new(pass, parts.join("; "))
}

fn c11_lifecycle() -> Outcome {
    let dir = scratch_dir("c11");
    match common::lifecycle(&dir) {
        Ok(l) => {
            let failures = l.failures();
            let tamper_caught = l.tampered_receipt.code == 1 && l.tampered_receipt.output["error"] == "invalid_receipt";
            Outcome::new(
                failures.is_empty() && l.elapsed < Duration::from_secs(60) && tamper_caught,
                format!(
                    "{} steps, all exit 0: {}, in {:.1}s; tampered receipt rejected: {tamper_caught}{}",
                    l.steps.len(),
                    failures.is_empty(),
                    l.elapsed.as_secs_f64(),
                    failures.first().map(|f| format!("; {f}")).unwrap_or_default()
                ),
            )
        }
        Err(e) => Outcome::new(false, e),
    }
}
