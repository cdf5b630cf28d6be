//! Offline verification of a whole ledger file.

use std::io;
use std::path::Path;

use super::merkle::MerkleTree;
use super::{root_signing_message, EntryKind, LedgerEntry, SignedRoot, ENTRY_HEADER_LEN, ENTRY_OVERHEAD};
use crate::codec::Canonical;
use crate::crypto::PublicKey;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainStatus {
    Ok {
        entries: u64,
        /// Entries after the last Signature entry (digest-checked only).
        unsigned_tail: u64,
    },
    FirstBadSeqno(u64),
}

#[derive(Debug, thiserror::Error)]
pub enum ChainError {
    #[error("cannot read ledger: {0}")]
    Io(#[from] io::Error),
    #[error("ledger truncated at byte {offset}; last complete seqno {last_good:?}")]
    Truncated { offset: u64, last_good: Option<u64> },
}

pub(crate) struct Frame<'a> {
    pub body: &'a [u8],
    pub end: usize,
}

enum FrameScan<'a> {
    Frame(Frame<'a>),
    /// Framing is inconsistent with the entry header.
    Malformed,
    /// The file ends inside this frame.
    Torn,
}

fn scan_frame(buf: &[u8], pos: usize) -> FrameScan<'_> {
    let rest = &buf[pos..];
    if rest.len() < 4 {
        return FrameScan::Torn;
    }
    let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let body = &rest[4..];
    if body.len() < ENTRY_HEADER_LEN {
        return if body.len() < len { FrameScan::Torn } else { FrameScan::Malformed };
    }
    let payload_len = u32::from_le_bytes(body[10..14].try_into().expect("4 bytes")) as usize;
    if len != ENTRY_OVERHEAD + payload_len {
        return FrameScan::Malformed;
    }
    if body.len() < len {
        return FrameScan::Torn;
    }
    FrameScan::Frame(Frame { body: &body[..len], end: pos + 4 + len })
}

/// The complete frame at `pos`, or `None` for a torn or malformed tail.
pub(crate) fn frame_at(buf: &[u8], pos: usize) -> Option<Frame<'_>> {
    match scan_frame(buf, pos) {
        FrameScan::Frame(f) => Some(f),
        _ => None,
    }
}

/// Recomputes every entry digest and every signed root in `path`.
pub fn verify_chain(path: impl AsRef<Path>, trusted: &PublicKey) -> Result<ChainStatus, ChainError> {
    let buf = std::fs::read(path)?;
    verify_chain_bytes(&buf, trusted)
}

pub fn verify_chain_bytes(buf: &[u8], trusted: &PublicKey) -> Result<ChainStatus, ChainError> {
    let mut tree = MerkleTree::new();
    let mut pos = 0usize;
    let mut unsigned = 0u64;
    while pos < buf.len() {
        let seqno = tree.len();
        let frame = match scan_frame(buf, pos) {
            FrameScan::Frame(f) => f,
            FrameScan::Malformed => return Ok(ChainStatus::FirstBadSeqno(seqno)),
            FrameScan::Torn => {
                return Err(ChainError::Truncated {
                    offset: pos as u64,
                    last_good: seqno.checked_sub(1),
                })
            }
        };
        let Ok(entry) = LedgerEntry::from_bytes(frame.body) else {
            return Ok(ChainStatus::FirstBadSeqno(seqno));
        };
        if entry.seqno != seqno || entry.recompute_digest() != entry.digest {
            return Ok(ChainStatus::FirstBadSeqno(seqno));
        }
        if entry.kind == EntryKind::Signature {
            let Ok(signed) = SignedRoot::from_bytes(&entry.payload) else {
                return Ok(ChainStatus::FirstBadSeqno(seqno));
            };
            let good = signed.tree_size == seqno
                && tree.root_at(seqno) == Some(signed.root)
                && trusted.verify(&root_signing_message(&signed.root), &signed.signature).is_ok();
            if !good {
                return Ok(ChainStatus::FirstBadSeqno(seqno));
            }
            unsigned = 0;
        } else {
            unsigned += 1;
        }
        tree.push(entry.digest);
        pos = frame.end;
    }
    Ok(ChainStatus::Ok { entries: tree.len(), unsigned_tail: unsigned })
}
