//! Files a node keeps in its data directory.
//!
//! ```text
//! node.key        hex Ed25519 seed of the node identity
//! secrets.sealed  service secrets sealed to (platform, measurement)
//! cluster.json    node id and the initial voter set
//! raft.state      JSON hard state (term, vote), replaced atomically
//! raft.log        frames: u32 len (LE) || canonical LogRecord
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use conledger_core::codec::Canonical;
use conledger_core::consensus::{HardState, LogRecord, NodeId, PersistDelta};
use conledger_core::crypto::{KeyPair, PublicKey};
use conledger_core::enclave::{seal, unseal, Measurement, Platform, SealedBlob};
use conledger_core::service::ServiceSecrets;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StorageError + '_ {
    move |source| StorageError::Io { path: path.to_path_buf(), source }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> StorageError {
    StorageError::Corrupt { path: path.to_path_buf(), reason: reason.into() }
}

/// Write-then-rename so readers never see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StorageError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlatformFile {
    platform_id: String,
    key_seed: String,
    secret: String,
}

/// Writes emulated platform key material (what real hardware would hold).
pub fn save_platform(path: &Path, p: &Platform) -> Result<(), StorageError> {
    let f = PlatformFile { platform_id: p.id().into(), key_seed: hex::encode(p.key_seed()), secret: hex::encode(p.secret()) };
    write_atomic(path, serde_json::to_string_pretty(&f).expect("serializes").as_bytes())
}

pub fn load_platform(path: &Path) -> Result<Platform, StorageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let f: PlatformFile = serde_json::from_str(&text).map_err(|e| corrupt(path, e.to_string()))?;
    let arr = |s: &str| -> Result<[u8; 32], StorageError> {
        hex::decode(s).ok().and_then(|v| v.try_into().ok()).ok_or_else(|| corrupt(path, "expected 32 hex bytes"))
    };
    Ok(Platform::from_parts(f.platform_id, arr(&f.key_seed)?, arr(&f.secret)?))
}

pub fn save_key(path: &Path, k: &KeyPair) -> Result<(), StorageError> {
    write_atomic(path, k.to_hex().as_bytes())
}

pub fn load_key(path: &Path) -> Result<KeyPair, StorageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    KeyPair::from_hex(text.trim()).map_err(|e| corrupt(path, e.to_string()))
}

pub fn load_public_key(path: &Path) -> Result<PublicKey, StorageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    PublicKey::from_hex(text.trim()).map_err(|e| corrupt(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterFile {
    pub node_id: NodeId,
    /// Voter id -> node address of the cluster's first node.
    pub initial_voters: BTreeMap<NodeId, String>,
}

/// Paths inside one node's data directory.
#[derive(Debug, Clone)]
pub struct DataDir(pub PathBuf);

impl DataDir {
    pub fn create(dir: &Path) -> Result<Self, StorageError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(DataDir(dir.to_path_buf()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn node_key(&self) -> PathBuf {
        self.path("node.key")
    }

    /// Loads the node identity, generating and saving one if absent.
    pub fn load_or_create_identity<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Result<KeyPair, StorageError> {
        let p = self.node_key();
        if p.exists() {
            return load_key(&p);
        }
        let k = KeyPair::generate(rng);
        save_key(&p, &k)?;
        Ok(k)
    }

    pub fn save_secrets<R: RngCore + CryptoRng>(
        &self,
        s: &ServiceSecrets,
        m: &Measurement,
        platform: &Platform,
        rng: &mut R,
    ) -> Result<(), StorageError> {
        write_atomic(&self.path("secrets.sealed"), &seal(&s.to_bytes(), m, platform, rng).to_bytes())
    }

    pub fn load_secrets(&self, m: &Measurement, platform: &Platform) -> Result<ServiceSecrets, StorageError> {
        let p = self.path("secrets.sealed");
        let raw = fs::read(&p).map_err(io_err(&p))?;
        let blob = SealedBlob::from_bytes(&raw).map_err(|e| corrupt(&p, e.to_string()))?;
        let plain = unseal(&blob, m, platform).map_err(|e| corrupt(&p, e.to_string()))?;
        ServiceSecrets::from_bytes(&plain).ok_or_else(|| corrupt(&p, "wrong secret length"))
    }

    pub fn save_cluster(&self, c: &ClusterFile) -> Result<(), StorageError> {
        write_atomic(&self.path("cluster.json"), serde_json::to_string_pretty(c).expect("serializes").as_bytes())
    }

    pub fn load_cluster(&self) -> Result<ClusterFile, StorageError> {
        let p = self.path("cluster.json");
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        serde_json::from_str(&text).map_err(|e| corrupt(&p, e.to_string()))
    }
}

/// Durable Raft hard state and log.
pub struct RaftStore {
    state_path: PathBuf,
    log_path: PathBuf,
    log: BufWriter<File>,
    /// offsets[i] is where the frame of index i + 1 starts
    offsets: Vec<u64>,
    end: u64,
    hard: HardState,
}

impl RaftStore {
    /// Opens (or creates) the store, returning persisted state. A torn
    /// final frame is cut off.
    pub fn open(dir: &DataDir) -> Result<(Self, HardState, Vec<LogRecord>), StorageError> {
        let state_path = dir.path("raft.state");
        let log_path = dir.path("raft.log");
        let hard = match fs::read_to_string(&state_path) {
            Ok(t) => serde_json::from_str(&t).map_err(|e| corrupt(&state_path, e.to_string()))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => HardState::default(),
            Err(e) => return Err(io_err(&state_path)(e)),
        };
        let mut f = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&log_path).map_err(io_err(&log_path))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(io_err(&log_path))?;
        let mut records = Vec::new();
        let mut offsets = Vec::new();
        let mut pos = 0usize;
        while buf.len() - pos >= 4 {
            let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().expect("4 bytes")) as usize;
            let Some(frame) = buf.get(pos + 4..pos + 4 + len) else { break };
            let Ok(r) = LogRecord::from_bytes(frame) else { break };
            offsets.push(pos as u64);
            records.push(r);
            pos += 4 + len;
        }
        if pos < buf.len() {
            log::warn!("{}: discarding {} trailing bytes", log_path.display(), buf.len() - pos);
            f.set_len(pos as u64).map_err(io_err(&log_path))?;
        }
        f.seek(SeekFrom::Start(pos as u64)).map_err(io_err(&log_path))?;
        let store = RaftStore { state_path, log_path, log: BufWriter::new(f), offsets, end: pos as u64, hard };
        Ok((store, hard, records))
    }

    /// Applies a delta and flushes it to the OS.
    pub fn persist(&mut self, d: &PersistDelta) -> Result<(), StorageError> {
        if d.hard_state != self.hard {
            write_atomic(&self.state_path, &serde_json::to_vec(&d.hard_state).expect("serializes"))?;
            self.hard = d.hard_state;
        }
        if let Some(from) = d.rewrite_from {
            let keep = (from - 1) as usize;
            if keep < self.offsets.len() {
                self.log.flush().map_err(io_err(&self.log_path))?;
                let at = self.offsets[keep];
                self.log.get_mut().set_len(at).map_err(io_err(&self.log_path))?;
                self.log.seek(SeekFrom::Start(at)).map_err(io_err(&self.log_path))?;
                self.offsets.truncate(keep);
                self.end = at;
            }
            for r in &d.records {
                let body = r.to_bytes();
                self.log.write_all(&(body.len() as u32).to_le_bytes()).map_err(io_err(&self.log_path))?;
                self.log.write_all(&body).map_err(io_err(&self.log_path))?;
                self.offsets.push(self.end);
                self.end += 4 + body.len() as u64;
            }
        }
        self.log.flush().map_err(io_err(&self.log_path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use conledger_core::consensus::EntryPayload;

    fn rec(term: u64, b: u8) -> LogRecord {
        LogRecord { term, payload: EntryPayload::Command(vec![b; 3]) }
    }

    #[test]
    fn raft_store_round_trips_and_rewrites() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = DataDir::create(tmp.path()).unwrap();
        let (mut s, hard, log) = RaftStore::open(&dir).unwrap();
        assert_eq!((hard, log.len()), (HardState::default(), 0));
        let h = HardState { current_term: 3, voted_for: Some(9) };
        s.persist(&PersistDelta { hard_state: h, rewrite_from: Some(1), records: vec![rec(1, 1), rec(1, 2), rec(2, 3)] }).unwrap();
        s.persist(&PersistDelta { hard_state: h, rewrite_from: Some(2), records: vec![rec(3, 4)] }).unwrap();
        drop(s);
        let (_, hard, log) = RaftStore::open(&dir).unwrap();
        assert_eq!(hard, h);
        assert_eq!(log, vec![rec(1, 1), rec(3, 4)]);
    }

    #[test]
    fn torn_tail_is_cut() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = DataDir::create(tmp.path()).unwrap();
        let (mut s, _, _) = RaftStore::open(&dir).unwrap();
        s.persist(&PersistDelta { hard_state: HardState::default(), rewrite_from: Some(1), records: vec![rec(1, 1), rec(1, 2)] }).unwrap();
        drop(s);
        let p = dir.path("raft.log");
        let len = fs::metadata(&p).unwrap().len();
        OpenOptions::new().write(true).open(&p).unwrap().set_len(len - 2).unwrap();
        let (_, _, log) = RaftStore::open(&dir).unwrap();
        assert_eq!(log, vec![rec(1, 1)]);
    }

    #[test]
    fn secrets_seal_round_trip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let tmp = tempfile::tempdir().unwrap();
        let dir = DataDir::create(tmp.path()).unwrap();
        let p = Platform::generate("p", &mut rng);
        let m = conledger_core::enclave::measure(b"code");
        let s = ServiceSecrets::generate(&mut rng);
        dir.save_secrets(&s, &m, &p, &mut rng).unwrap();
        assert_eq!(dir.load_secrets(&m, &p).unwrap().to_bytes(), s.to_bytes());
        let other = conledger_core::enclave::measure(b"other code");
        assert!(dir.load_secrets(&other, &p).is_err());
    }
}
