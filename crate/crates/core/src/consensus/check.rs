//! Trace checkers for the Raft safety and liveness properties.
//!
//! Each checker works only from a [`Trace`] and recomputes its property from
//! the raw events and final node states, independently of the online checks
//! the simulator records as `Violation` events.

use std::collections::{BTreeMap, BTreeSet};

use super::raft::{NodeId, RaftConfig};
use super::sim::{command_id, record_fingerprint, Trace, TraceEvent, PROBE_COMMAND};

pub type CheckResult = Result<(), String>;

/// At most one leader per term.
pub fn election_safety(t: &Trace) -> CheckResult {
    let mut by_term: BTreeMap<u64, NodeId> = BTreeMap::new();
    for (tick, node, term) in t.leaders() {
        if let Some(prev) = by_term.insert(term, node) {
            if prev != node {
                return Err(format!("term {term} has leaders {prev} and {node} (tick {tick})"));
            }
        }
    }
    Ok(())
}

/// No two nodes apply different entries at the same index.
pub fn state_machine_safety(t: &Trace) -> CheckResult {
    let mut at: BTreeMap<u64, (u64, u64, NodeId)> = BTreeMap::new();
    for e in &t.events {
        if let TraceEvent::Applied { node, index, term, fingerprint, .. } = e {
            match at.get(index) {
                Some(&(tm, fp, other)) if (tm, fp) != (*term, *fingerprint) => {
                    return Err(format!("index {index}: node {other} and node {node} applied different entries"));
                }
                Some(_) => {}
                None => {
                    at.insert(*index, (*term, *fingerprint, *node));
                }
            }
        }
    }
    Ok(())
}

/// Logs that agree on (index, term) agree on the whole prefix.
pub fn log_matching(t: &Trace) -> CheckResult {
    let logs: Vec<_> = t.nodes.iter().map(|n| (&n.state.node_id, &n.state.log)).collect();
    for (i, (a_id, a)) in logs.iter().enumerate() {
        for (b_id, b) in &logs[i + 1..] {
            let common = a.len().min(b.len());
            // the highest index with matching terms fixes the whole prefix
            if let Some(k) = (0..common).rev().find(|k| a[*k].term == b[*k].term) {
                if a[..=k] != b[..=k] {
                    return Err(format!("nodes {a_id} and {b_id} share (index {}, term) but differ before it", k + 1));
                }
            }
        }
    }
    Ok(())
}

/// Every entry any node applied is still in place on every node that has
/// committed that far, and every node's log is a superset of the globally
/// committed prefix up to its own commit index.
pub fn no_committed_loss(t: &Trace) -> CheckResult {
    let mut committed: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for e in &t.events {
        if let TraceEvent::Applied { index, term, fingerprint, .. } = e {
            committed.entry(*index).or_insert((*term, *fingerprint));
        }
    }
    let max_committed = committed.keys().next_back().copied().unwrap_or(0);
    for n in &t.nodes {
        for (index, (term, fp)) in committed.range(..=n.state.commit_index) {
            let ok = n.state.log.get(*index as usize - 1).is_some_and(|r| r.term == *term && record_fingerprint(r) == *fp);
            if !ok {
                return Err(format!("node {} lost committed index {index}", n.state.node_id));
            }
        }
    }
    // the final leader must hold everything ever committed
    if let Some(leader) = t.nodes.iter().filter(|n| n.alive && n.state.role == super::raft::Role::Leader).max_by_key(|n| n.state.current_term) {
        if (leader.state.log.len() as u64) < max_committed {
            return Err(format!("final leader {} is missing committed entries", leader.state.node_id));
        }
    }
    if let Some(v) = t.violations().next() {
        return Err(v.to_string());
    }
    Ok(())
}

/// Every submitted command is applied exactly once by every node that has
/// applied past it, and no node applies a command twice.
pub fn exactly_once(t: &Trace) -> CheckResult {
    let wanted: BTreeSet<u64> = (0..t.commands_submitted).collect();
    let mut any = BTreeSet::new();
    for n in &t.nodes {
        let mut seen = BTreeSet::new();
        for c in &n.applied_commands {
            if !seen.insert(*c) {
                return Err(format!("node {} applied command {c} twice", n.state.node_id));
            }
        }
        any.extend(seen.into_iter().filter(|c| *c != PROBE_COMMAND));
    }
    if t.completed && any != wanted {
        let missing: Vec<_> = wanted.difference(&any).take(5).collect();
        return Err(format!("commands never applied: {missing:?}"));
    }
    Ok(())
}

/// Within one leader term, commands land in the log in submission order.
pub fn proposal_order_per_term(t: &Trace) -> CheckResult {
    for n in &t.nodes {
        let mut last: BTreeMap<u64, u64> = BTreeMap::new();
        for r in &n.state.log {
            let Some(c) = command_id(&r.payload).filter(|c| *c != PROBE_COMMAND) else {
                continue;
            };
            if let Some(prev) = last.insert(r.term, c) {
                if c <= prev {
                    return Err(format!("node {} term {}: command {c} after {prev}", n.state.node_id, r.term));
                }
            }
        }
    }
    Ok(())
}

/// After faults stop, the probe command commits within `spans` maximum
/// election timeouts.
pub fn bounded_liveness(t: &Trace, spans: u64) -> CheckResult {
    let Some(end) = t.faults_end else {
        return Ok(());
    };
    let bound = spans * RaftConfig::default().election_timeout_max;
    match t.probe_applied {
        Some(at) if at <= end + bound => Ok(()),
        Some(at) => Err(format!("first post-fault commit at tick {at}, {} ticks after faults ended (bound {bound})", at - end)),
        None => Err(format!("no commit after faults ended at tick {end}")),
    }
}

/// All safety checks.
pub fn safety(t: &Trace) -> CheckResult {
    election_safety(t)?;
    state_machine_safety(t)?;
    log_matching(t)?;
    no_committed_loss(t)?;
    exactly_once(t)
}
