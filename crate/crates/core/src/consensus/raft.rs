//! Single-node Raft state machine.
//!
//! Standard Raft without pre-vote or joint consensus. Membership changes are
//! single-server `AddNode`/`RemoveNode` log records that take effect as soon
//! as they are appended. The node is driven by logical ticks and never does
//! I/O: callers deliver messages, send what it returns, persist the
//! [`PersistDelta`] before sending, and apply what [`RaftNode::take_committed`]
//! hands back.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};

pub type NodeId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryPayload {
    /// Appended by every new leader so earlier-term entries can commit.
    Noop,
    Command(Vec<u8>),
    /// `context` is opaque to consensus (the node layer stores addresses).
    AddNode { id: NodeId, context: Vec<u8> },
    RemoveNode { id: NodeId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub term: u64,
    pub payload: EntryPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageBody {
    RequestVote {
        last_log_index: u64,
        last_log_term: u64,
    },
    RequestVoteReply {
        granted: bool,
    },
    AppendEntries {
        prev_log_index: u64,
        prev_log_term: u64,
        entries: Vec<LogRecord>,
        leader_commit: u64,
    },
    AppendEntriesReply {
        success: bool,
        /// On success, the index of the last entry known to match.
        match_index: u64,
        /// On failure, where the leader should retry from.
        hint: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: NodeId,
    pub to: NodeId,
    pub term: u64,
    pub body: MessageBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaftConfig {
    pub election_timeout_min: u64,
    pub election_timeout_max: u64,
    pub heartbeat_interval: u64,
    pub max_batch: usize,
}

impl Default for RaftConfig {
    fn default() -> Self {
        RaftConfig {
            election_timeout_min: 10,
            election_timeout_max: 20,
            heartbeat_interval: 2,
            max_batch: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HardState {
    pub current_term: u64,
    pub voted_for: Option<NodeId>,
}

/// What must reach stable storage before the returned messages are sent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersistDelta {
    pub hard_state: HardState,
    /// Discard stored records at this index and above, then append `records`
    /// starting at this index. `None` means the log is unchanged.
    pub rewrite_from: Option<u64>,
    pub records: Vec<LogRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not the leader (last known leader: {leader_hint:?})")]
pub struct NotLeader {
    pub leader_hint: Option<NodeId>,
}

/// Serializable snapshot of a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaftNodeState {
    pub node_id: NodeId,
    pub role: Role,
    pub current_term: u64,
    pub voted_for: Option<NodeId>,
    pub log: Vec<LogRecord>,
    pub commit_index: u64,
    pub last_applied: u64,
}

#[derive(Debug, Clone)]
pub struct RaftNode {
    id: NodeId,
    cfg: RaftConfig,
    initial_voters: BTreeMap<NodeId, Vec<u8>>,
    voters: BTreeMap<NodeId, Vec<u8>>,
    role: Role,
    current_term: u64,
    voted_for: Option<NodeId>,
    // log[i] holds index i + 1
    log: Vec<LogRecord>,
    commit_index: u64,
    last_applied: u64,
    leader_hint: Option<NodeId>,
    votes: BTreeSet<NodeId>,
    next_index: BTreeMap<NodeId, u64>,
    match_index: BTreeMap<NodeId, u64>,
    now: u64,
    election_deadline: u64,
    heartbeat_due: u64,
    rng: ChaCha8Rng,
    hard_dirty: bool,
    rewrite_from: Option<u64>,
}

impl RaftNode {
    pub fn new(id: NodeId, initial_voters: BTreeMap<NodeId, Vec<u8>>, cfg: RaftConfig, seed: u64) -> Self {
        let mut n = RaftNode {
            id,
            cfg,
            voters: initial_voters.clone(),
            initial_voters,
            role: Role::Follower,
            current_term: 0,
            voted_for: None,
            log: Vec::new(),
            commit_index: 0,
            last_applied: 0,
            leader_hint: None,
            votes: BTreeSet::new(),
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            now: 0,
            election_deadline: 0,
            heartbeat_due: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ id.rotate_left(17)),
            hard_dirty: false,
            rewrite_from: None,
        };
        n.reset_election_timer();
        n
    }

    /// Rebuilds a node from persisted state after a crash. Entries up to
    /// `applied` were committed before the crash, so commit restarts there.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        id: NodeId,
        initial_voters: BTreeMap<NodeId, Vec<u8>>,
        cfg: RaftConfig,
        seed: u64,
        hard: HardState,
        log: Vec<LogRecord>,
        applied: u64,
        now: u64,
    ) -> Self {
        let mut n = Self::new(id, initial_voters, cfg, seed);
        n.current_term = hard.current_term;
        n.voted_for = hard.voted_for;
        n.log = log;
        n.commit_index = applied.min(n.last_index());
        n.last_applied = n.commit_index;
        n.now = now;
        n.recompute_voters();
        n.reset_election_timer();
        n
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn term(&self) -> u64 {
        self.current_term
    }

    pub fn voted_for(&self) -> Option<NodeId> {
        self.voted_for
    }

    pub fn leader_hint(&self) -> Option<NodeId> {
        self.leader_hint
    }

    pub fn commit_index(&self) -> u64 {
        self.commit_index
    }

    pub fn last_applied(&self) -> u64 {
        self.last_applied
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn voters(&self) -> &BTreeMap<NodeId, Vec<u8>> {
        &self.voters
    }

    pub fn hard_state(&self) -> HardState {
        HardState { current_term: self.current_term, voted_for: self.voted_for }
    }

    pub fn match_index_of(&self, peer: NodeId) -> Option<u64> {
        self.match_index.get(&peer).copied()
    }

    pub fn state(&self) -> RaftNodeState {
        RaftNodeState {
            node_id: self.id,
            role: self.role,
            current_term: self.current_term,
            voted_for: self.voted_for,
            log: self.log.clone(),
            commit_index: self.commit_index,
            last_applied: self.last_applied,
        }
    }

    pub fn term_at(&self, index: u64) -> Option<u64> {
        if index == 0 {
            Some(0)
        } else {
            self.log.get(index as usize - 1).map(|r| r.term)
        }
    }

    fn last_term(&self) -> u64 {
        self.log.last().map(|r| r.term).unwrap_or(0)
    }

    fn peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        let me = self.id;
        self.voters.keys().copied().filter(move |p| *p != me)
    }

    fn quorum(&self, have: impl Iterator<Item = NodeId>) -> bool {
        let n = have.filter(|v| self.voters.contains_key(v)).count();
        n * 2 > self.voters.len()
    }

    fn reset_election_timer(&mut self) {
        let span = self
            .rng
            .gen_range(self.cfg.election_timeout_min..=self.cfg.election_timeout_max);
        self.election_deadline = self.now + span;
    }

    fn set_term(&mut self, term: u64) {
        if term > self.current_term {
            self.current_term = term;
            self.voted_for = None;
            self.hard_dirty = true;
        }
    }

    fn become_follower(&mut self, term: u64, leader: Option<NodeId>) {
        self.set_term(term);
        self.role = Role::Follower;
        self.votes.clear();
        if leader.is_some() {
            self.leader_hint = leader;
        }
    }

    fn mark_rewrite(&mut self, from: u64) {
        self.rewrite_from = Some(self.rewrite_from.map_or(from, |f| f.min(from)));
    }

    fn push_record(&mut self, rec: LogRecord) {
        let index = self.last_index() + 1;
        match &rec.payload {
            EntryPayload::AddNode { id, context } => {
                self.voters.insert(*id, context.clone());
                if self.role == Role::Leader && *id != self.id {
                    self.next_index.entry(*id).or_insert(index);
                    self.match_index.entry(*id).or_insert(0);
                }
            }
            EntryPayload::RemoveNode { id } => {
                self.voters.remove(id);
                self.next_index.remove(id);
                self.match_index.remove(id);
            }
            _ => {}
        }
        self.log.push(rec);
        self.mark_rewrite(index);
    }

    fn truncate_from(&mut self, index: u64) {
        self.log.truncate(index as usize - 1);
        self.mark_rewrite(index);
        self.recompute_voters();
    }

    fn recompute_voters(&mut self) {
        let mut v = self.initial_voters.clone();
        for r in &self.log {
            match &r.payload {
                EntryPayload::AddNode { id, context } => {
                    v.insert(*id, context.clone());
                }
                EntryPayload::RemoveNode { id } => {
                    v.remove(id);
                }
                _ => {}
            }
        }
        self.voters = v;
    }

    fn msg(&self, to: NodeId, body: MessageBody) -> Message {
        Message { from: self.id, to, term: self.current_term, body }
    }

    /// Advances logical time.
    pub fn tick(&mut self, now: u64) -> Vec<Message> {
        self.now = now.max(self.now);
        match self.role {
            Role::Leader => {
                if self.now >= self.heartbeat_due {
                    self.heartbeat_due = self.now + self.cfg.heartbeat_interval;
                    let peers: Vec<NodeId> = self.peers().collect();
                    peers.into_iter().map(|p| self.append_entries_for(p)).collect()
                } else {
                    Vec::new()
                }
            }
            Role::Follower | Role::Candidate => {
                if self.now >= self.election_deadline && self.voters.contains_key(&self.id) {
                    self.start_election()
                } else {
                    Vec::new()
                }
            }
        }
    }

    fn start_election(&mut self) -> Vec<Message> {
        self.current_term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.hard_dirty = true;
        self.leader_hint = None;
        self.votes = BTreeSet::from([self.id]);
        self.reset_election_timer();
        if self.quorum(self.votes.iter().copied()) {
            return self.become_leader();
        }
        let body = MessageBody::RequestVote {
            last_log_index: self.last_index(),
            last_log_term: self.last_term(),
        };
        self.peers().map(|p| self.msg(p, body.clone())).collect()
    }

    fn become_leader(&mut self) -> Vec<Message> {
        self.role = Role::Leader;
        self.leader_hint = Some(self.id);
        self.votes.clear();
        let next = self.last_index() + 1;
        let peers: Vec<NodeId> = self.peers().collect();
        self.next_index = peers.iter().map(|p| (*p, next)).collect();
        self.match_index = peers.iter().map(|p| (*p, 0)).collect();
        self.push_record(LogRecord { term: self.current_term, payload: EntryPayload::Noop });
        self.advance_commit();
        self.heartbeat_due = self.now + self.cfg.heartbeat_interval;
        peers.into_iter().map(|p| self.append_entries_for(p)).collect()
    }

    fn append_entries_for(&mut self, peer: NodeId) -> Message {
        let last = self.last_index();
        let next = self.next_index.get(&peer).copied().unwrap_or(last + 1).clamp(1, last + 1);
        let prev = next - 1;
        let end = last.min(prev + self.cfg.max_batch as u64);
        let entries = self.log[prev as usize..end as usize].to_vec();
        self.next_index.insert(peer, end + 1);
        self.msg(
            peer,
            MessageBody::AppendEntries {
                prev_log_index: prev,
                prev_log_term: self.term_at(prev).expect("prev within log"),
                entries,
                leader_commit: self.commit_index,
            },
        )
    }

    /// Sends any entries peers have not been sent yet.
    pub fn replicate(&mut self) -> Vec<Message> {
        if self.role != Role::Leader {
            return Vec::new();
        }
        let last = self.last_index();
        let lagging: Vec<NodeId> = self
            .peers()
            .filter(|p| self.next_index.get(p).copied().unwrap_or(1) <= last)
            .collect();
        lagging.into_iter().map(|p| self.append_entries_for(p)).collect()
    }

    pub fn propose(&mut self, payload: EntryPayload) -> Result<u64, NotLeader> {
        if self.role != Role::Leader {
            return Err(NotLeader { leader_hint: self.leader_hint });
        }
        self.push_record(LogRecord { term: self.current_term, payload });
        self.advance_commit();
        Ok(self.last_index())
    }

    pub fn handle(&mut self, m: Message) -> Vec<Message> {
        if m.to != self.id {
            log::debug!("node {} dropping message addressed to {}", self.id, m.to);
            return Vec::new();
        }
        if m.term > self.current_term {
            let leader = matches!(m.body, MessageBody::AppendEntries { .. }).then_some(m.from);
            self.become_follower(m.term, leader);
        }
        match m.body {
            MessageBody::RequestVote { last_log_index, last_log_term } => {
                let up_to_date = (last_log_term, last_log_index) >= (self.last_term(), self.last_index());
                let granted = m.term == self.current_term
                    && self.voted_for.is_none_or(|v| v == m.from)
                    && up_to_date;
                if granted {
                    self.voted_for = Some(m.from);
                    self.hard_dirty = true;
                    self.reset_election_timer();
                }
                vec![self.msg(m.from, MessageBody::RequestVoteReply { granted })]
            }
            MessageBody::RequestVoteReply { granted } => {
                if self.role == Role::Candidate && m.term == self.current_term && granted {
                    self.votes.insert(m.from);
                    if self.quorum(self.votes.iter().copied()) {
                        return self.become_leader();
                    }
                }
                Vec::new()
            }
            MessageBody::AppendEntries { prev_log_index, prev_log_term, entries, leader_commit } => {
                if m.term < self.current_term {
                    let reply = MessageBody::AppendEntriesReply {
                        success: false,
                        match_index: 0,
                        hint: self.last_index() + 1,
                    };
                    return vec![self.msg(m.from, reply)];
                }
                if self.role != Role::Follower {
                    self.become_follower(m.term, Some(m.from));
                }
                self.leader_hint = Some(m.from);
                self.reset_election_timer();
                let reply = self.accept_entries(prev_log_index, prev_log_term, entries, leader_commit);
                vec![self.msg(m.from, reply)]
            }
            MessageBody::AppendEntriesReply { success, match_index, hint } => {
                if self.role != Role::Leader || m.term != self.current_term {
                    return Vec::new();
                }
                if !self.voters.contains_key(&m.from) {
                    return Vec::new();
                }
                if success {
                    let mi = self.match_index.entry(m.from).or_insert(0);
                    *mi = (*mi).max(match_index);
                    let ni = self.next_index.entry(m.from).or_insert(1);
                    *ni = (*ni).max(match_index + 1);
                    self.advance_commit();
                    if self.next_index[&m.from] <= self.last_index() {
                        return vec![self.append_entries_for(m.from)];
                    }
                    Vec::new()
                } else {
                    let matched = self.match_index.get(&m.from).copied().unwrap_or(0);
                    let next = hint.min(self.last_index() + 1).max(matched + 1);
                    self.next_index.insert(m.from, next);
                    vec![self.append_entries_for(m.from)]
                }
            }
        }
    }

    fn accept_entries(
        &mut self,
        prev_index: u64,
        prev_term: u64,
        entries: Vec<LogRecord>,
        leader_commit: u64,
    ) -> MessageBody {
        match self.term_at(prev_index) {
            None => {
                return MessageBody::AppendEntriesReply {
                    success: false,
                    match_index: 0,
                    hint: self.last_index() + 1,
                }
            }
            Some(t) if t != prev_term => {
                // back up to the first index of the conflicting term
                let mut i = prev_index;
                while i > 1 && self.term_at(i - 1) == Some(t) && i - 1 > self.commit_index {
                    i -= 1;
                }
                return MessageBody::AppendEntriesReply { success: false, match_index: 0, hint: i };
            }
            Some(_) => {}
        }
        let n = entries.len() as u64;
        for (k, rec) in entries.into_iter().enumerate() {
            let index = prev_index + 1 + k as u64;
            match self.term_at(index) {
                Some(t) if t == rec.term => continue,
                Some(_) => {
                    assert!(index > self.commit_index, "leader tried to overwrite a committed entry");
                    self.truncate_from(index);
                    self.push_record(rec);
                }
                None => self.push_record(rec),
            }
        }
        let matched = prev_index + n;
        if leader_commit > self.commit_index {
            self.commit_index = leader_commit.min(matched).max(self.commit_index);
        }
        MessageBody::AppendEntriesReply { success: true, match_index: matched, hint: 0 }
    }

    fn advance_commit(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let last = self.last_index();
        for n in (self.commit_index + 1..=last).rev() {
            if self.term_at(n) != Some(self.current_term) {
                break;
            }
            let have = self
                .voters
                .keys()
                .filter(|v| if **v == self.id { last >= n } else { self.match_index.get(v).copied().unwrap_or(0) >= n })
                .count();
            if have * 2 > self.voters.len() {
                self.commit_index = n;
                break;
            }
        }
        if !self.voters.contains_key(&self.id) {
            // removed from the configuration: stop leading once that is committed
            let removal_committed = self.log[..self.commit_index as usize]
                .iter()
                .any(|r| r.payload == EntryPayload::RemoveNode { id: self.id });
            if removal_committed {
                self.role = Role::Follower;
                self.leader_hint = None;
            }
        }
    }

    /// Committed records not yet handed out, in index order.
    pub fn take_committed(&mut self) -> Vec<(u64, LogRecord)> {
        let from = self.last_applied;
        let to = self.commit_index;
        self.last_applied = to;
        (from + 1..=to).map(|i| (i, self.log[i as usize - 1].clone())).collect()
    }

    pub fn take_persist(&mut self) -> Option<PersistDelta> {
        if !self.hard_dirty && self.rewrite_from.is_none() {
            return None;
        }
        self.hard_dirty = false;
        let rewrite_from = self.rewrite_from.take();
        let records = match rewrite_from {
            Some(f) => self.log[(f as usize - 1).min(self.log.len())..].to_vec(),
            None => Vec::new(),
        };
        Some(PersistDelta { hard_state: self.hard_state(), rewrite_from, records })
    }
}

impl Canonical for EntryPayload {
    fn encode(&self, e: &mut Encoder) {
        match self {
            EntryPayload::Noop => {
                e.u8(0);
            }
            EntryPayload::Command(c) => {
                e.u8(1).bytes(c);
            }
            EntryPayload::AddNode { id, context } => {
                e.u8(2).u64(*id).bytes(context);
            }
            EntryPayload::RemoveNode { id } => {
                e.u8(3).u64(*id);
            }
        }
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(match d.u8()? {
            0 => EntryPayload::Noop,
            1 => EntryPayload::Command(d.bytes()?.to_vec()),
            2 => EntryPayload::AddNode { id: d.u64()?, context: d.bytes()?.to_vec() },
            3 => EntryPayload::RemoveNode { id: d.u64()? },
            _ => return Err(d.invalid("entry payload tag")),
        })
    }
}

impl Canonical for LogRecord {
    fn encode(&self, e: &mut Encoder) {
        e.u64(self.term);
        self.payload.encode(e);
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(LogRecord { term: d.u64()?, payload: EntryPayload::decode(d)? })
    }
}

/// Wire layout: `u64 from || u64 to || u64 term || u8 kind || fields`.
impl Canonical for Message {
    fn encode(&self, e: &mut Encoder) {
        e.u64(self.from).u64(self.to).u64(self.term);
        match &self.body {
            MessageBody::RequestVote { last_log_index, last_log_term } => {
                e.u8(0).u64(*last_log_index).u64(*last_log_term);
            }
            MessageBody::RequestVoteReply { granted } => {
                e.u8(1).bool(*granted);
            }
            MessageBody::AppendEntries { prev_log_index, prev_log_term, entries, leader_commit } => {
                e.u8(2).u64(*prev_log_index).u64(*prev_log_term).u64(*leader_commit);
                e.len_prefix(entries.len());
                for r in entries {
                    r.encode(e);
                }
            }
            MessageBody::AppendEntriesReply { success, match_index, hint } => {
                e.u8(3).bool(*success).u64(*match_index).u64(*hint);
            }
        }
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let from = d.u64()?;
        let to = d.u64()?;
        let term = d.u64()?;
        let body = match d.u8()? {
            0 => MessageBody::RequestVote { last_log_index: d.u64()?, last_log_term: d.u64()? },
            1 => MessageBody::RequestVoteReply { granted: d.bool()? },
            2 => {
                let prev_log_index = d.u64()?;
                let prev_log_term = d.u64()?;
                let leader_commit = d.u64()?;
                let n = d.len_prefix(9)?;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    entries.push(LogRecord::decode(d)?);
                }
                MessageBody::AppendEntries { prev_log_index, prev_log_term, entries, leader_commit }
            }
            3 => MessageBody::AppendEntriesReply {
                success: d.bool()?,
                match_index: d.u64()?,
                hint: d.u64()?,
            },
            _ => return Err(d.invalid("message kind")),
        };
        Ok(Message { from, to, term, body })
    }
}
