//! Append-only Merkle ledger.
//!
//! # File format
//!
//! A ledger file is a sequence of frames with no file header:
//!
//! ```text
//! frame  := u32 length (LE) || entry
//! entry  := u64 seqno || u8 kind || u8 privacy || u32 payload_len || payload || digest[32]
//! digest := SHA-256( u8 kind || u8 privacy || u32 payload_len || payload || u64 seqno )
//! ```
//!
//! `kind` is 0 = Governance, 1 = App, 2 = Signature. `privacy` is 0 = Public,
//! 1 = Private. The frame length always equals `46 + payload_len`.
//!
//! A private payload is stored as `nonce[12] || ChaCha20-Poly1305 ciphertext`
//! under the service data key, with associated data `u64 seqno || u8 kind`.
//! The nonce is HKDF-SHA256 of the data key (salt `"conledger/nonce/v1"`,
//! info `u64 seqno || u8 kind || SHA-256(plaintext)`). Identical append
//! sequences under identical keys produce identical files, and a seqno that
//! is rewritten after truncation never reuses a nonce for new plaintext.
//!
//! A Signature entry's payload is `u64 tree_size || root[32] || u32 64 ||
//! signature[64]`. It signs the Merkle root over every entry before it
//! (`tree_size == seqno`) with the service identity key; the signed message
//! is `"conledger/root/v1" || root`.

pub mod audit;
pub mod merkle;
pub mod receipt;

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{hash, hash_parts, Digest, KeyPair, Signature, SymmetricKey, NONCE_LEN};

pub use audit::{verify_chain, verify_chain_bytes, ChainError, ChainStatus};
pub use merkle::{MerkleTree, Side};
pub use receipt::{verify_receipt, verify_receipt_bytes, Receipt};

pub const ENTRY_HEADER_LEN: usize = 8 + 1 + 1 + 4;
pub const ENTRY_OVERHEAD: usize = ENTRY_HEADER_LEN + 32;
pub const ROOT_SIGNING_DOMAIN: &[u8] = b"conledger/root/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum EntryKind {
    Governance,
    App,
    Signature,
}

impl EntryKind {
    pub fn code(self) -> u8 {
        match self {
            EntryKind::Governance => 0,
            EntryKind::App => 1,
            EntryKind::Signature => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(EntryKind::Governance),
            1 => Some(EntryKind::App),
            2 => Some(EntryKind::Signature),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Privacy {
    Public,
    Private,
}

impl Privacy {
    pub fn code(self) -> u8 {
        match self {
            Privacy::Public => 0,
            Privacy::Private => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Privacy::Public),
            1 => Some(Privacy::Private),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub seqno: u64,
    pub kind: EntryKind,
    pub privacy: Privacy,
    /// Ciphertext when `privacy` is Private.
    pub payload: Vec<u8>,
    pub digest: Digest,
}

pub fn entry_digest(kind: EntryKind, privacy: Privacy, payload: &[u8], seqno: u64) -> Digest {
    let len = (payload.len() as u32).to_le_bytes();
    hash_parts(&[&[kind.code(), privacy.code()], &len, payload, &seqno.to_le_bytes()])
}

impl LedgerEntry {
    pub fn new(seqno: u64, kind: EntryKind, privacy: Privacy, payload: Vec<u8>) -> Self {
        let digest = entry_digest(kind, privacy, &payload, seqno);
        LedgerEntry { seqno, kind, privacy, payload, digest }
    }

    pub fn recompute_digest(&self) -> Digest {
        entry_digest(self.kind, self.privacy, &self.payload, self.seqno)
    }

    pub fn frame(&self) -> Vec<u8> {
        let body = self.to_bytes();
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }
}

impl Canonical for LedgerEntry {
    fn encode(&self, e: &mut Encoder) {
        e.u64(self.seqno)
            .u8(self.kind.code())
            .u8(self.privacy.code())
            .bytes(&self.payload)
            .digest(&self.digest);
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let seqno = d.u64()?;
        let kind = EntryKind::from_code(d.u8()?).ok_or_else(|| d.invalid("entry kind"))?;
        let privacy = Privacy::from_code(d.u8()?).ok_or_else(|| d.invalid("privacy class"))?;
        let payload = d.bytes()?.to_vec();
        let digest = d.digest()?;
        Ok(LedgerEntry { seqno, kind, privacy, payload, digest })
    }
}

/// Payload of a Signature entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedRoot {
    pub tree_size: u64,
    pub root: Digest,
    pub signature: Signature,
}

impl Canonical for SignedRoot {
    fn encode(&self, e: &mut Encoder) {
        e.u64(self.tree_size).digest(&self.root).bytes(&self.signature.0);
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tree_size = d.u64()?;
        let root = d.digest()?;
        let sig = d.bytes()?;
        let signature = Signature::from_slice(sig).map_err(|_| d.invalid("signature length"))?;
        Ok(SignedRoot { tree_size, root, signature })
    }
}

pub fn root_signing_message(root: &Digest) -> Vec<u8> {
    let mut m = Vec::with_capacity(ROOT_SIGNING_DOMAIN.len() + 32);
    m.extend_from_slice(ROOT_SIGNING_DOMAIN);
    m.extend_from_slice(&root.0);
    m
}

/// Nonce for a private payload: keyed on the data key and bound to the
/// entry position and plaintext. Rewriting a seqno after truncation with a
/// different payload therefore never reuses a nonce.
fn private_nonce(key: &SymmetricKey, seqno: u64, kind: EntryKind, plaintext: &[u8]) -> [u8; NONCE_LEN] {
    let aad = private_aad(seqno, kind);
    key.synthetic_nonce(&[&aad[..], &hash(plaintext).0].concat())
}

fn private_aad(seqno: u64, kind: EntryKind) -> [u8; 9] {
    let mut aad = [0u8; 9];
    aad[..8].copy_from_slice(&seqno.to_le_bytes());
    aad[8] = kind.code();
    aad
}

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("ledger i/o: {0}")]
    Io(#[from] io::Error),
    #[error("configuration: a data key is required for private entries")]
    MissingDataKey,
    #[error("configuration: no service signing key installed")]
    NoSigner,
    #[error("seqno {0} not found")]
    NotFound(u64),
    #[error("seqno {0} is not yet covered by a signed root")]
    NotYetSigned(u64),
    #[error("ledger file {0} already exists")]
    AlreadyExists(PathBuf),
    #[error("corrupt ledger at seqno {seqno}: {reason}")]
    Corrupt { seqno: u64, reason: String },
    #[error("private payload of seqno {0} failed authentication")]
    Decrypt(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerConfig {
    /// Entries between automatic Signature entries.
    pub signature_interval: u64,
    /// When false, the owner calls [`Ledger::sign_if_due`] itself.
    pub auto_sign: bool,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig { signature_interval: 10, auto_sign: true }
    }
}

#[derive(Debug)]
struct FileSink {
    path: PathBuf,
    writer: BufWriter<File>,
    // byte offset of each frame
    offsets: Vec<u64>,
    len: u64,
}

/// Outcome of reopening a ledger file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub entries: u64,
    /// Bytes of a torn trailing frame that were discarded.
    pub discarded_bytes: u64,
}

#[derive(Debug)]
pub struct Ledger {
    cfg: LedgerConfig,
    entries: Vec<LedgerEntry>,
    tree: MerkleTree,
    // (signature entry seqno, signed root)
    signatures: Vec<(u64, SignedRoot)>,
    signer: Option<KeyPair>,
    sink: Option<FileSink>,
    unsigned: u64,
    bytes: u64,
}

impl Ledger {
    pub fn in_memory(cfg: LedgerConfig) -> Self {
        Ledger {
            cfg,
            entries: Vec::new(),
            tree: MerkleTree::new(),
            signatures: Vec::new(),
            signer: None,
            sink: None,
            unsigned: 0,
            bytes: 0,
        }
    }

    /// Creates a new ledger file. Refuses to overwrite an existing one.
    pub fn create(path: impl AsRef<Path>, cfg: LedgerConfig) -> Result<Self, LedgerError> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| match e.kind() {
                io::ErrorKind::AlreadyExists => LedgerError::AlreadyExists(path.to_path_buf()),
                _ => LedgerError::Io(e),
            })?;
        let mut l = Self::in_memory(cfg);
        l.sink = Some(FileSink {
            path: path.to_path_buf(),
            writer: BufWriter::new(file),
            offsets: Vec::new(),
            len: 0,
        });
        Ok(l)
    }

    /// Reopens an existing ledger file, discarding a torn trailing frame.
    pub fn open(path: impl AsRef<Path>, cfg: LedgerConfig) -> Result<(Self, RecoveryReport), LedgerError> {
        let path = path.as_ref();
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;

        let mut l = Self::in_memory(cfg);
        let mut offsets = Vec::new();
        let mut pos = 0usize;
        while pos < buf.len() {
            let Some(frame) = audit::frame_at(&buf, pos) else { break };
            let seqno = offsets.len() as u64;
            let entry = LedgerEntry::from_bytes(frame.body).map_err(|e| LedgerError::Corrupt {
                seqno,
                reason: e.to_string(),
            })?;
            if entry.seqno != seqno || entry.recompute_digest() != entry.digest {
                return Err(LedgerError::Corrupt { seqno, reason: "digest or seqno mismatch".into() });
            }
            offsets.push(pos as u64);
            l.push_entry(entry)?;
            pos = frame.end;
        }
        let discarded = (buf.len() - pos) as u64;
        if discarded > 0 {
            log::warn!("discarding {discarded} bytes of torn ledger tail in {}", path.display());
            file.set_len(pos as u64)?;
        }
        file.seek(SeekFrom::End(0))?;
        l.bytes = pos as u64;
        l.sink = Some(FileSink {
            path: path.to_path_buf(),
            writer: BufWriter::new(file),
            offsets,
            len: pos as u64,
        });
        let report = RecoveryReport { entries: l.len(), discarded_bytes: discarded };
        Ok((l, report))
    }

    pub fn config(&self) -> LedgerConfig {
        self.cfg
    }

    pub fn set_signer(&mut self, key: KeyPair) {
        self.signer = Some(key);
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|s| s.path.as_path())
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn entry(&self, seqno: u64) -> Option<&LedgerEntry> {
        self.entries.get(seqno as usize)
    }

    /// Total bytes of framed entries.
    pub fn byte_len(&self) -> u64 {
        self.bytes
    }

    pub fn root(&self) -> Option<Digest> {
        self.tree.root()
    }

    pub fn unsigned_count(&self) -> u64 {
        self.unsigned
    }

    /// Highest seqno covered by a signed root.
    pub fn signed_upto(&self) -> Option<u64> {
        self.signatures.last().map(|(_, r)| r.tree_size - 1)
    }

    pub fn signature_roots(&self) -> impl Iterator<Item = (u64, &SignedRoot)> {
        self.signatures.iter().map(|(s, r)| (*s, r))
    }

    fn push_entry(&mut self, entry: LedgerEntry) -> Result<(), LedgerError> {
        if entry.kind == EntryKind::Signature {
            let sr = SignedRoot::from_bytes(&entry.payload).map_err(|e| LedgerError::Corrupt {
                seqno: entry.seqno,
                reason: e.to_string(),
            })?;
            self.signatures.push((entry.seqno, sr));
            self.unsigned = 0;
        } else {
            self.unsigned += 1;
        }
        self.tree.push(entry.digest);
        self.bytes += (4 + ENTRY_OVERHEAD + entry.payload.len()) as u64;
        self.entries.push(entry);
        Ok(())
    }

    fn write_entry(&mut self, entry: LedgerEntry) -> Result<(), LedgerError> {
        if let Some(sink) = self.sink.as_mut() {
            let frame = entry.frame();
            sink.writer.write_all(&frame)?;
            sink.offsets.push(sink.len);
            sink.len += frame.len() as u64;
        }
        self.push_entry(entry)
    }

    /// Appends one entry and returns its seqno and the new root.
    pub fn append(
        &mut self,
        kind: EntryKind,
        privacy: Privacy,
        payload: &[u8],
        data_key: Option<&SymmetricKey>,
    ) -> Result<(u64, Digest), LedgerError> {
        let seqno = self.len();
        let stored = match privacy {
            Privacy::Public => payload.to_vec(),
            Privacy::Private => {
                let key = data_key.ok_or(LedgerError::MissingDataKey)?;
                let nonce = private_nonce(key, seqno, kind, payload);
                let mut out = nonce.to_vec();
                out.extend(key.encrypt(&nonce, &private_aad(seqno, kind), payload));
                out
            }
        };
        self.write_entry(LedgerEntry::new(seqno, kind, privacy, stored))?;
        let root = self.tree.root().expect("non-empty");
        if self.cfg.auto_sign && kind != EntryKind::Signature {
            self.sign_if_due()?;
        }
        Ok((seqno, root))
    }

    /// Signs when at least `signature_interval` entries are unsigned.
    pub fn sign_if_due(&mut self) -> Result<Option<u64>, LedgerError> {
        if self.signer.is_some() && self.unsigned >= self.cfg.signature_interval {
            self.sign_now()
        } else {
            Ok(None)
        }
    }

    /// Appends a Signature entry over everything so far, if anything is
    /// unsigned.
    pub fn sign_now(&mut self) -> Result<Option<u64>, LedgerError> {
        if self.unsigned == 0 {
            return Ok(None);
        }
        let signer = self.signer.as_ref().ok_or(LedgerError::NoSigner)?;
        let tree_size = self.len();
        let root = self.tree.root().expect("unsigned entries exist");
        let signature = signer.sign(&root_signing_message(&root));
        let payload = SignedRoot { tree_size, root, signature }.to_bytes();
        let seqno = tree_size;
        self.write_entry(LedgerEntry::new(seqno, EntryKind::Signature, Privacy::Public, payload))?;
        Ok(Some(seqno))
    }

    pub fn flush(&mut self) -> Result<(), LedgerError> {
        if let Some(s) = self.sink.as_mut() {
            s.writer.flush()?;
        }
        Ok(())
    }

    /// Drops the ledger without writing buffered frames, as a crash would.
    pub fn abandon(self) {
        if let Some(sink) = self.sink {
            let (_file, _unwritten) = sink.writer.into_parts();
        }
    }

    /// Drops every entry at `n` and beyond, in memory and on disk.
    pub fn truncate(&mut self, n: u64) -> Result<(), LedgerError> {
        if n >= self.len() {
            return Ok(());
        }
        self.entries.truncate(n as usize);
        self.tree.truncate(n);
        self.signatures.retain(|(s, _)| *s < n);
        let last_sig = self.signatures.last().map(|(s, _)| *s + 1).unwrap_or(0);
        self.unsigned = n - last_sig;
        self.bytes = self
            .entries
            .iter()
            .map(|e| (4 + ENTRY_OVERHEAD + e.payload.len()) as u64)
            .sum();
        if let Some(sink) = self.sink.as_mut() {
            sink.writer.flush()?;
            let cut = sink.offsets[n as usize];
            sink.offsets.truncate(n as usize);
            sink.len = cut;
            let f = sink.writer.get_mut();
            f.set_len(cut)?;
            f.seek(SeekFrom::Start(cut))?;
        }
        Ok(())
    }

    /// Decrypts (if needed) and returns an entry's payload.
    pub fn read_payload(&self, seqno: u64, data_key: Option<&SymmetricKey>) -> Result<Vec<u8>, LedgerError> {
        let e = self.entry(seqno).ok_or(LedgerError::NotFound(seqno))?;
        decrypt_payload(e, data_key)
    }

    pub fn get_receipt(&self, seqno: u64) -> Result<Receipt, LedgerError> {
        let entry = self.entry(seqno).ok_or(LedgerError::NotFound(seqno))?;
        // first signature whose tree covers seqno
        let i = self.signatures.partition_point(|(_, r)| r.tree_size <= seqno);
        let (_, signed) = self.signatures.get(i).ok_or(LedgerError::NotYetSigned(seqno))?;
        let signer = self.signer.as_ref().map(KeyPair::public).ok_or(LedgerError::NoSigner)?;
        let proof_path = self.tree.path(seqno, signed.tree_size).expect("seqno < tree_size");
        Ok(Receipt {
            seqno,
            entry_digest: entry.digest,
            proof_path,
            root: signed.root,
            root_signature: signed.signature,
            service_identity: signer,
        })
    }
}

pub fn decrypt_payload(e: &LedgerEntry, data_key: Option<&SymmetricKey>) -> Result<Vec<u8>, LedgerError> {
    match e.privacy {
        Privacy::Public => Ok(e.payload.clone()),
        Privacy::Private => {
            let key = data_key.ok_or(LedgerError::MissingDataKey)?;
            if e.payload.len() < NONCE_LEN {
                return Err(LedgerError::Decrypt(e.seqno));
            }
            let (nonce, ct) = e.payload.split_at(NONCE_LEN);
            let nonce: [u8; NONCE_LEN] = nonce.try_into().expect("split at nonce length");
            key.decrypt(&nonce, &private_aad(e.seqno, e.kind), ct)
                .map_err(|_| LedgerError::Decrypt(e.seqno))
        }
    }
}

/// SHA-256 over a whole file's bytes; handy for determinism checks.
pub fn file_digest(path: impl AsRef<Path>) -> io::Result<Digest> {
    Ok(hash(&std::fs::read(path)?))
}
