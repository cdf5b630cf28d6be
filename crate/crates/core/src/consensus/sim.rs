//! Deterministic single-threaded cluster simulator.
//!
//! Every source of nondeterminism (message drops, delays, election timers)
//! is drawn from RNGs seeded by [`SimNetConfig::seed`], so a config and a
//! workload always produce the same [`Trace`].
//!
//! The simulated client tags every command with a 64-bit id and resubmits
//! outstanding commands whenever leadership changes. The replicated state
//! machine ignores ids it has already applied, which gives exactly-once
//! application on top of at-least-once submission.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raft::{EntryPayload, HardState, LogRecord, Message, NodeId, RaftConfig, RaftNode, RaftNodeState, Role};
use crate::codec::Canonical;
use crate::crypto::hash;

/// Id reserved for the probe command submitted once faults end.
pub const PROBE_COMMAND: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionWindow {
    pub from_tick: u64,
    pub until_tick: u64,
    /// One side of the cut; everyone else is on the other side.
    pub group: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimNetConfig {
    pub seed: u64,
    pub drop_probability: f64,
    /// Inclusive bounds on per-message delay, in ticks.
    pub delay_range: (u64, u64),
    pub partitions: Vec<PartitionWindow>,
    /// Drops stop at this tick. `None` keeps dropping for the whole run.
    pub faults_end: Option<u64>,
}

impl SimNetConfig {
    pub fn reliable(seed: u64) -> Self {
        SimNetConfig { seed, drop_probability: 0.0, delay_range: (1, 1), partitions: Vec::new(), faults_end: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WorkloadEvent {
    Propose(Vec<u8>),
    Crash(NodeId),
    /// Crashes whichever node currently leads with the highest term.
    CrashLeader,
    Restart(NodeId),
    /// Restarts every crashed node.
    RestartAll,
    Partition(BTreeSet<NodeId>),
    Heal,
}

impl WorkloadEvent {
    fn is_fault(&self) -> bool {
        !matches!(self, WorkloadEvent::Propose(_))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub events: Vec<(u64, WorkloadEvent)>,
}

impl Workload {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn at(mut self, tick: u64, ev: WorkloadEvent) -> Self {
        self.events.push((tick, ev));
        self
    }

    /// `n` proposals of `data-<i>`, one every `every` ticks from `start`.
    pub fn proposals(mut self, start: u64, every: u64, n: usize) -> Self {
        for i in 0..n {
            let data = format!("data-{i}").into_bytes();
            self.events.push((start + i as u64 * every, WorkloadEvent::Propose(data)));
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Elected { tick: u64, node: NodeId, term: u64 },
    Proposed { tick: u64, node: NodeId, term: u64, index: u64, command: u64 },
    Applied { tick: u64, node: NodeId, index: u64, term: u64, fingerprint: u64, command: Option<u64>, duplicate: bool },
    Crashed { tick: u64, node: NodeId },
    Restarted { tick: u64, node: NodeId },
    Partitioned { tick: u64, group: BTreeSet<NodeId> },
    Healed { tick: u64 },
    Violation { tick: u64, what: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFinal {
    pub state: RaftNodeState,
    pub alive: bool,
    /// Command ids in the order this node's state machine applied them.
    pub applied_commands: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub cluster_size: usize,
    pub events: Vec<TraceEvent>,
    pub nodes: Vec<NodeFinal>,
    /// False when `max_ticks` ran out first.
    pub completed: bool,
    pub ticks_run: u64,
    /// Tick after which no faults are injected, if the run had any.
    pub faults_end: Option<u64>,
    /// Tick at which the post-fault probe command was first applied.
    pub probe_applied: Option<u64>,
    pub commands_submitted: u64,
}

#[derive(Serialize)]
struct TraceSummary<'a> {
    event: &'static str,
    cluster_size: usize,
    completed: bool,
    ticks_run: u64,
    faults_end: Option<u64>,
    probe_applied: Option<u64>,
    nodes: &'a [NodeFinal],
}

impl Trace {
    /// One JSON object per line: every event, then a summary line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            out.push_str(&serde_json::to_string(ev).expect("trace events serialize"));
            out.push('\n');
        }
        let summary = TraceSummary {
            event: "summary",
            cluster_size: self.cluster_size,
            completed: self.completed,
            ticks_run: self.ticks_run,
            faults_end: self.faults_end,
            probe_applied: self.probe_applied,
            nodes: &self.nodes,
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn leaders(&self) -> impl Iterator<Item = (u64, NodeId, u64)> + '_ {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Elected { tick, node, term } => Some((*tick, *node, *term)),
            _ => None,
        })
    }

    pub fn violations(&self) -> impl Iterator<Item = &str> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Violation { what, .. } => Some(what.as_str()),
            _ => None,
        })
    }
}

pub fn encode_command(id: u64, data: &[u8]) -> Vec<u8> {
    let mut v = id.to_le_bytes().to_vec();
    v.extend_from_slice(data);
    v
}

pub fn command_id(payload: &EntryPayload) -> Option<u64> {
    match payload {
        EntryPayload::Command(c) if c.len() >= 8 => Some(u64::from_le_bytes(c[..8].try_into().ok()?)),
        _ => None,
    }
}

pub fn record_fingerprint(r: &LogRecord) -> u64 {
    let d = hash(&r.to_bytes());
    u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"))
}

/// What a node keeps across a crash.
#[derive(Debug, Clone, Default)]
struct Durable {
    hard: HardState,
    log: Vec<LogRecord>,
    applied: u64,
    applied_ids: BTreeSet<u64>,
    applied_order: Vec<u64>,
}

struct Queued {
    at: u64,
    seq: u64,
    msg: Message,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(o.at, o.seq))
    }
}

struct Sim<'a> {
    cfg: &'a SimNetConfig,
    raft: RaftConfig,
    voters: BTreeMap<NodeId, Vec<u8>>,
    nodes: BTreeMap<NodeId, Option<RaftNode>>,
    durable: BTreeMap<NodeId, Durable>,
    incarnation: BTreeMap<NodeId, u64>,
    net_rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    now: u64,
    event_partition: Option<BTreeSet<NodeId>>,
    events: Vec<TraceEvent>,
    seen_leaders: BTreeSet<(NodeId, u64)>,
    committed: BTreeMap<u64, (u64, u64)>,
    pending: BTreeMap<u64, Vec<u8>>,
    submitted: BTreeMap<u64, (NodeId, u64)>,
    probe_applied: Option<u64>,
}

impl Sim<'_> {
    fn partitioned(&self, a: NodeId, b: NodeId) -> bool {
        let t = self.now;
        let cut = |g: &BTreeSet<NodeId>| g.contains(&a) != g.contains(&b);
        self.event_partition.as_ref().is_some_and(cut)
            || self.cfg.partitions.iter().any(|w| t >= w.from_tick && t < w.until_tick && cut(&w.group))
    }

    fn drops_active(&self) -> bool {
        self.cfg.faults_end.is_none_or(|end| self.now < end)
    }

    fn send(&mut self, msgs: Vec<Message>) {
        for msg in msgs {
            if self.drops_active() && self.cfg.drop_probability > 0.0 && self.net_rng.gen_bool(self.cfg.drop_probability.min(1.0)) {
                continue;
            }
            let (lo, hi) = self.cfg.delay_range;
            let delay = self.net_rng.gen_range(lo.max(1)..=hi.max(lo).max(1));
            self.seq += 1;
            self.queue.push(Reverse(Queued { at: self.now + delay, seq: self.seq, msg }));
        }
    }

    fn violation(&mut self, what: String) {
        log::warn!("consensus violation at tick {}: {what}", self.now);
        self.events.push(TraceEvent::Violation { tick: self.now, what });
    }

    /// Persists, records elections, and applies newly committed entries.
    fn observe(&mut self, id: NodeId) {
        let now = self.now;
        let Some(node) = self.nodes.get_mut(&id).and_then(Option::as_mut) else {
            return;
        };
        let durable = self.durable.get_mut(&id).expect("durable state per node");
        if let Some(delta) = node.take_persist() {
            durable.hard = delta.hard_state;
            if let Some(from) = delta.rewrite_from {
                durable.log.truncate(from as usize - 1);
                durable.log.extend(delta.records);
            }
        }
        let became_leader = node.role() == Role::Leader && self.seen_leaders.insert((id, node.term()));
        let term = node.term();
        let committed = node.take_committed();
        let mut newly = Vec::new();
        for (index, rec) in committed {
            let fp = record_fingerprint(&rec);
            let cmd = command_id(&rec.payload);
            let duplicate = cmd.is_some_and(|c| !durable.applied_ids.insert(c));
            if let (Some(c), false) = (cmd, duplicate) {
                durable.applied_order.push(c);
            }
            durable.applied = index;
            self.events.push(TraceEvent::Applied { tick: now, node: id, index, term: rec.term, fingerprint: fp, command: cmd, duplicate });
            newly.push((index, rec.term, fp, cmd));
        }
        let leader_log = became_leader.then(|| node.log().to_vec());

        if became_leader {
            self.events.push(TraceEvent::Elected { tick: now, node: id, term });
            let log = leader_log.expect("captured");
            let mut missing = Vec::new();
            for (index, (t, fp)) in &self.committed {
                let ok = log.get(*index as usize - 1).is_some_and(|r| r.term == *t && record_fingerprint(r) == *fp);
                if !ok {
                    missing.push(*index);
                }
            }
            if !missing.is_empty() {
                self.violation(format!("leader {id} of term {term} lacks committed indices {missing:?}"));
            }
        }
        for (index, t, fp, cmd) in newly {
            match self.committed.get(&index) {
                Some(&(et, efp)) if (et, efp) != (t, fp) => {
                    self.violation(format!("node {id} applied a different entry at index {index}"));
                }
                Some(_) => {}
                None => {
                    self.committed.insert(index, (t, fp));
                }
            }
            if let Some(c) = cmd {
                self.pending.remove(&c);
                self.submitted.remove(&c);
                if c == PROBE_COMMAND && self.probe_applied.is_none() {
                    self.probe_applied = Some(now);
                }
            }
        }
    }

    fn crash(&mut self, id: NodeId) {
        if let Some(slot) = self.nodes.get_mut(&id) {
            if slot.take().is_some() {
                self.events.push(TraceEvent::Crashed { tick: self.now, node: id });
            }
        }
    }

    fn restart(&mut self, id: NodeId) {
        let alive = matches!(self.nodes.get(&id), Some(Some(_)));
        if alive || !self.nodes.contains_key(&id) {
            return;
        }
        let inc = self.incarnation.entry(id).or_insert(0);
        *inc += 1;
        let d = &self.durable[&id];
        let seed = self.cfg.seed.wrapping_add(inc.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let node = RaftNode::restore(id, self.voters.clone(), self.raft, seed, d.hard, d.log.clone(), d.applied, self.now);
        self.nodes.insert(id, Some(node));
        self.events.push(TraceEvent::Restarted { tick: self.now, node: id });
    }

    fn current_leader(&self) -> Option<(NodeId, u64)> {
        self.nodes
            .iter()
            .filter_map(|(id, n)| n.as_ref().filter(|n| n.is_leader()).map(|n| (*id, n.term())))
            .max_by_key(|(id, t)| (*t, Reverse(*id)))
    }

    fn submit(&mut self) {
        let Some((leader, term)) = self.current_leader() else {
            return;
        };
        let todo: Vec<(u64, Vec<u8>)> = self
            .pending
            .iter()
            .filter(|(c, _)| self.submitted.get(c) != Some(&(leader, term)))
            .map(|(c, p)| (*c, p.clone()))
            .collect();
        if todo.is_empty() {
            return;
        }
        let node = self.nodes.get_mut(&leader).and_then(Option::as_mut).expect("leader alive");
        for (cmd, payload) in todo {
            let index = node.propose(EntryPayload::Command(payload)).expect("leader accepts proposals");
            self.submitted.insert(cmd, (leader, term));
            self.events.push(TraceEvent::Proposed { tick: self.now, node: leader, term, index, command: cmd });
        }
        let out = node.replicate();
        self.observe(leader);
        self.send(out);
    }
}

/// Runs `workload` against a fresh cluster of nodes `1..=cluster_size`.
///
/// Once the last scripted fault has passed, a probe command is submitted so
/// the trace shows whether the cluster can still commit. The run completes
/// when the workload is exhausted and every command (probe included) has
/// been applied by some node.
pub fn run_simulation(cluster_size: usize, cfg: &SimNetConfig, workload: &Workload, max_ticks: u64) -> Trace {
    assert!(cluster_size >= 1, "cluster needs at least one node");
    let ids: Vec<NodeId> = (1..=cluster_size as u64).collect();
    let voters: BTreeMap<NodeId, Vec<u8>> = ids.iter().map(|i| (*i, Vec::new())).collect();
    let raft = RaftConfig::default();

    let mut events = workload.events.clone();
    events.sort_by_key(|(t, _)| *t);
    let last_scripted_fault = events.iter().filter(|(_, e)| e.is_fault()).map(|(t, _)| *t).max();
    let last_window = cfg.partitions.iter().map(|w| w.until_tick).max();
    let faults_end = [last_scripted_fault, last_window, cfg.faults_end.filter(|_| cfg.drop_probability > 0.0)]
        .into_iter()
        .flatten()
        .max();

    let mut sim = Sim {
        cfg,
        raft,
        nodes: ids.iter().map(|i| (*i, Some(RaftNode::new(*i, voters.clone(), raft, cfg.seed)))).collect(),
        voters,
        durable: ids.iter().map(|i| (*i, Durable::default())).collect(),
        incarnation: BTreeMap::new(),
        net_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        queue: BinaryHeap::new(),
        seq: 0,
        now: 0,
        event_partition: None,
        events: Vec::new(),
        seen_leaders: BTreeSet::new(),
        committed: BTreeMap::new(),
        pending: BTreeMap::new(),
        submitted: BTreeMap::new(),
        probe_applied: None,
    };

    let mut next_event = 0usize;
    let mut next_cmd = 0u64;
    let mut probe_sent = false;
    let mut completed = false;
    let mut tick = 0u64;
    while tick <= max_ticks {
        sim.now = tick;
        while next_event < events.len() && events[next_event].0 <= tick {
            match events[next_event].1.clone() {
                WorkloadEvent::Propose(data) => {
                    sim.pending.insert(next_cmd, encode_command(next_cmd, &data));
                    next_cmd += 1;
                }
                WorkloadEvent::Crash(id) => sim.crash(id),
                WorkloadEvent::CrashLeader => {
                    if let Some((id, _)) = sim.current_leader() {
                        sim.crash(id);
                    }
                }
                WorkloadEvent::Restart(id) => sim.restart(id),
                WorkloadEvent::RestartAll => {
                    for id in ids.clone() {
                        sim.restart(id);
                    }
                }
                WorkloadEvent::Partition(group) => {
                    sim.events.push(TraceEvent::Partitioned { tick, group: group.clone() });
                    sim.event_partition = Some(group);
                }
                WorkloadEvent::Heal => {
                    sim.event_partition = None;
                    sim.events.push(TraceEvent::Healed { tick });
                }
            }
            next_event += 1;
        }
        if let Some(end) = faults_end {
            if !probe_sent && tick >= end {
                probe_sent = true;
                sim.pending.insert(PROBE_COMMAND, encode_command(PROBE_COMMAND, b"probe"));
            }
        }

        while sim.queue.peek().is_some_and(|q| q.0.at <= tick) {
            let Reverse(q) = sim.queue.pop().expect("peeked");
            let (from, to) = (q.msg.from, q.msg.to);
            if sim.partitioned(from, to) {
                continue;
            }
            let Some(node) = sim.nodes.get_mut(&to).and_then(Option::as_mut) else {
                continue;
            };
            let out = node.handle(q.msg);
            sim.observe(to);
            sim.send(out);
        }

        for id in &ids {
            let Some(node) = sim.nodes.get_mut(id).and_then(Option::as_mut) else {
                continue;
            };
            let out = node.tick(tick);
            sim.observe(*id);
            sim.send(out);
        }

        sim.submit();

        let probe_done = faults_end.is_none() || sim.probe_applied.is_some();
        if next_event >= events.len() && sim.pending.is_empty() && probe_done {
            completed = true;
            break;
        }
        tick += 1;
    }

    let nodes = ids
        .iter()
        .map(|id| {
            let d = &sim.durable[id];
            match &sim.nodes[id] {
                Some(n) => NodeFinal { state: n.state(), alive: true, applied_commands: d.applied_order.clone() },
                None => NodeFinal {
                    state: RaftNodeState {
                        node_id: *id,
                        role: Role::Follower,
                        current_term: d.hard.current_term,
                        voted_for: d.hard.voted_for,
                        log: d.log.clone(),
                        commit_index: d.applied,
                        last_applied: d.applied,
                    },
                    alive: false,
                    applied_commands: d.applied_order.clone(),
                },
            }
        })
        .collect();

    Trace {
        cluster_size,
        events: sim.events,
        nodes,
        completed,
        ticks_run: tick.min(max_ticks),
        faults_end,
        probe_applied: sim.probe_applied,
        commands_submitted: next_cmd,
    }
}

/// A random fault schedule for a five-node style cluster: message drops of at
/// most 20%, crashes and restarts of minority subsets, and exactly one
/// partition episode isolating a minority.
pub fn random_fault_scenario(seed: u64, cluster_size: usize, proposals: usize) -> (SimNetConfig, Workload) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fa17);
    let ids: Vec<NodeId> = (1..=cluster_size as u64).collect();
    let minority = (cluster_size - 1) / 2;

    let mut w = Workload::new().proposals(30, 2, proposals);
    let horizon = 30 + 2 * proposals as u64;
    let mut last = 0u64;

    if minority > 0 {
        for _ in 0..rng.gen_range(1..=3) {
            let k = rng.gen_range(1..=minority);
            let mut pool = ids.clone();
            let mut victims = Vec::new();
            for _ in 0..k {
                victims.push(pool.swap_remove(rng.gen_range(0..pool.len())));
            }
            let at = rng.gen_range(40..horizon.max(41));
            let back = at + rng.gen_range(20..=150);
            for v in victims {
                w = w.at(at, WorkloadEvent::Crash(v)).at(back, WorkloadEvent::Restart(v));
            }
            last = last.max(back);
        }
        if rng.gen_bool(0.5) {
            let at = rng.gen_range(40..horizon.max(41));
            w = w.at(at, WorkloadEvent::CrashLeader);
            last = last.max(at);
        }
    }

    let mut partitions = Vec::new();
    if minority > 0 {
        let k = rng.gen_range(1..=minority);
        let mut pool = ids.clone();
        let mut group = BTreeSet::new();
        for _ in 0..k {
            group.insert(pool.swap_remove(rng.gen_range(0..pool.len())));
        }
        let from = rng.gen_range(40..horizon.max(41));
        let until = from + rng.gen_range(30..=150);
        partitions.push(PartitionWindow { from_tick: from, until_tick: until, group });
        last = last.max(until);
    }

    let end = last.max(horizon) + 1;
    // bring back anyone a CrashLeader took down
    w = w.at(end, WorkloadEvent::RestartAll);
    let cfg = SimNetConfig {
        seed,
        drop_probability: rng.gen_range(0.0..=0.2),
        delay_range: (1, rng.gen_range(1..=4)),
        partitions,
        faults_end: Some(end),
    };
    (cfg, w)
}
