//! Raft replication of the ledger command log.

pub mod check;
mod raft;
pub mod sim;

pub use raft::{
    EntryPayload, HardState, LogRecord, Message, MessageBody, NodeId, NotLeader, PersistDelta, RaftConfig, RaftNode,
    RaftNodeState, Role,
};
pub use sim::{random_fault_scenario, run_simulation, PartitionWindow, SimNetConfig, Trace, TraceEvent, Workload, WorkloadEvent};
