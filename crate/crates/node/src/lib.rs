//! Network node for the conledger service: config, transport, runtime,
//! client, CLI and the benchmark harness.

pub mod bench;
pub mod cli;
pub mod client;
pub mod cluster;
pub mod config;
pub mod runtime;
pub mod storage;
pub mod wire;

pub use client::Client;
pub use config::NodeConfig;
pub use runtime::{join_node, restart_node, start_node, NodeError, NodeHandle};
