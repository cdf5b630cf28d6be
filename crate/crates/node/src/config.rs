//! Node configuration file (JSON, schema version 1).
//!
//! ```json
//! {
//!   "version": 1,
//!   "start": {
//!     "constitution_path": null,
//!     "initial_members": [{ "id": "member0", "public_key": "<hex ed25519>" }],
//!     "node_address": "127.0.0.1:7000",
//!     "rpc_address": "127.0.0.1:8000",
//!     "ledger_path": "n0/ledger.bin",
//!     "trusted_platforms": { "emu-0": "<hex ed25519>" },
//!     "allowed_nodes": ["<hex ed25519>"]
//!   },
//!   "enclave": { "platform_id": "emu-0", "platform_path": "platform.json", "code_blob_path": "app.blob" },
//!   "confidential_mode": true
//! }
//! ```
//!
//! A join config replaces `start` with
//! `"join": { "target_rpc_address", "node_address", "rpc_address", "ledger_path" }`.
//! Exactly one of the two blocks must be present. Relative paths resolve
//! against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use conledger_core::crypto::PublicKey;
use conledger_core::governance::Constitution;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;
/// Overrides where a node keeps its identity, sealed secrets and consensus log.
pub const DATA_DIR_ENV: &str = "CONLEDGER_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberEntry {
    pub id: String,
    pub public_key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    #[serde(default)]
    pub constitution_path: Option<PathBuf>,
    pub initial_members: Vec<MemberEntry>,
    pub node_address: String,
    pub rpc_address: String,
    pub ledger_path: PathBuf,
    /// Platform keys trusted to sign attestation quotes, besides our own.
    #[serde(default)]
    pub trusted_platforms: BTreeMap<String, PublicKey>,
    /// Node identities admitted without attestation when confidential mode is off.
    #[serde(default)]
    pub allowed_nodes: Vec<PublicKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinConfig {
    pub target_rpc_address: String,
    pub node_address: String,
    pub rpc_address: String,
    pub ledger_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnclaveConfig {
    pub platform_id: String,
    /// Emulated platform key material, as written by `conledger keygen --platform`.
    pub platform_path: PathBuf,
    pub code_blob_path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Start,
    Join,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<StartConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub join: Option<JoinConfig>,
    pub enclave: EnclaveConfig,
    #[serde(default = "default_true")]
    pub confidential_mode: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

/// `host:port` with a non-empty host and a numeric port.
pub fn is_host_port(s: &str) -> bool {
    match s.rsplit_once(':') {
        Some((host, port)) => !host.is_empty() && !host.contains(char::is_whitespace) && port.parse::<u16>().is_ok(),
        None => false,
    }
}

impl NodeConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: NodeConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, resolving relative paths against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        let addrs: Vec<(&str, &str)> = match (&self.start, &self.join) {
            (Some(_), Some(_)) => return bad("exactly one of `start` and `join` may be given, found both".into()),
            (None, None) => return bad("one of `start` or `join` is required".into()),
            (Some(s), None) => {
                if s.initial_members.is_empty() {
                    return bad("start.initial_members must not be empty".into());
                }
                vec![("start.node_address", &s.node_address), ("start.rpc_address", &s.rpc_address)]
            }
            (None, Some(j)) => vec![
                ("join.target_rpc_address", &j.target_rpc_address),
                ("join.node_address", &j.node_address),
                ("join.rpc_address", &j.rpc_address),
            ],
        };
        for (field, a) in addrs {
            if !is_host_port(a) {
                return bad(format!("{field}: {a:?} is not host:port"));
            }
        }
        if self.enclave.platform_id.is_empty() {
            return bad("enclave.platform_id must not be empty".into());
        }
        Ok(())
    }

    pub fn command(&self) -> Command {
        if self.start.is_some() {
            Command::Start
        } else {
            Command::Join
        }
    }

    pub fn ledger_path(&self) -> &Path {
        match (&self.start, &self.join) {
            (Some(s), _) => &s.ledger_path,
            (_, Some(j)) => &j.ledger_path,
            _ => unreachable!("validated"),
        }
    }

    pub fn node_address(&self) -> &str {
        self.start.as_ref().map(|s| s.node_address.as_str()).or(self.join.as_ref().map(|j| j.node_address.as_str())).expect("validated")
    }

    pub fn rpc_address(&self) -> &str {
        self.start.as_ref().map(|s| s.rpc_address.as_str()).or(self.join.as_ref().map(|j| j.rpc_address.as_str())).expect("validated")
    }

    /// `$CONLEDGER_DATA_DIR`, then `data_dir`, then the ledger's directory.
    pub fn data_dir(&self) -> PathBuf {
        if let Some(d) = std::env::var_os(DATA_DIR_ENV) {
            return PathBuf::from(d);
        }
        self.data_dir.clone().unwrap_or_else(|| self.ledger_path().parent().map(Path::to_path_buf).unwrap_or_default())
    }

    pub fn constitution(&self) -> Result<Constitution, ConfigError> {
        let Some(p) = self.start.as_ref().and_then(|s| s.constitution_path.as_ref()) else {
            return Ok(Constitution::default());
        };
        let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse { path: e.path().to_string(), message: e.inner().to_string() })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(s) = &mut self.start {
            fix(&mut s.ledger_path);
            if let Some(c) = &mut s.constitution_path {
                fix(c);
            }
        }
        if let Some(j) = &mut self.join {
            fix(&mut j.ledger_path);
        }
        fix(&mut self.enclave.platform_path);
        fix(&mut self.enclave.code_blob_path);
        if let Some(d) = &mut self.data_dir {
            fix(d);
        }
    }
}
