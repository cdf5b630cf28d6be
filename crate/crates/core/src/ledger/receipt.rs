//! Offline-verifiable inclusion receipts.
//!
//! Canonical encoding (also the receipt file format):
//!
//! ```text
//! u64 seqno || entry_digest[32] || u32 steps || (u8 side || sibling[32])*steps
//!   || root[32] || u32 64 || signature[64] || service_identity[32]
//! ```
//!
//! `side` is 0 for a left sibling and 1 for a right sibling.

use serde::{Deserialize, Serialize};

use super::merkle::{replay_path, Side};
use super::root_signing_message;
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{Digest, PublicKey, Signature};

const MAX_PATH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub seqno: u64,
    pub entry_digest: Digest,
    pub proof_path: Vec<(Side, Digest)>,
    pub root: Digest,
    pub root_signature: Signature,
    pub service_identity: PublicKey,
}

impl Canonical for Receipt {
    fn encode(&self, e: &mut Encoder) {
        e.u64(self.seqno).digest(&self.entry_digest).len_prefix(self.proof_path.len());
        for (side, sib) in &self.proof_path {
            e.u8(match side {
                Side::L => 0,
                Side::R => 1,
            })
            .digest(sib);
        }
        e.digest(&self.root)
            .bytes(&self.root_signature.0)
            .public_key(&self.service_identity);
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let seqno = d.u64()?;
        let entry_digest = d.digest()?;
        let steps = d.len_prefix(33)?;
        if steps > MAX_PATH {
            return Err(d.invalid("proof path length"));
        }
        let mut proof_path = Vec::with_capacity(steps);
        for _ in 0..steps {
            let side = match d.u8()? {
                0 => Side::L,
                1 => Side::R,
                _ => return Err(d.invalid("path side")),
            };
            proof_path.push((side, d.digest()?));
        }
        let root = d.digest()?;
        let sig = d.bytes()?;
        let root_signature = Signature::from_slice(sig).map_err(|_| d.invalid("signature length"))?;
        let service_identity = d.public_key()?;
        Ok(Receipt { seqno, entry_digest, proof_path, root, root_signature, service_identity })
    }
}

/// True iff the path replays to the root at the claimed position, the root
/// signature verifies, and the receipt names the trusted service.
pub fn verify_receipt(receipt: &Receipt, trusted: &PublicKey) -> bool {
    if receipt.service_identity != *trusted || receipt.proof_path.len() > MAX_PATH {
        return false;
    }
    let (root, index) = replay_path(&receipt.entry_digest, &receipt.proof_path);
    if root != receipt.root || index != receipt.seqno {
        return false;
    }
    trusted
        .verify(&root_signing_message(&receipt.root), &receipt.root_signature)
        .is_ok()
}

/// Parses and verifies a canonical receipt; malformed input is `false`.
pub fn verify_receipt_bytes(bytes: &[u8], trusted: &PublicKey) -> bool {
    Receipt::from_bytes(bytes).is_ok_and(|r| verify_receipt(&r, trusted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::ledger::{EntryKind, Ledger, LedgerConfig, Privacy};

    fn ledger_with(n: usize) -> (Ledger, PublicKey) {
        let key = KeyPair::from_seed([3u8; 32]);
        let mut l = Ledger::in_memory(LedgerConfig { signature_interval: 10, auto_sign: false });
        l.set_signer(key.clone());
        for i in 0..n {
            l.append(EntryKind::App, Privacy::Public, &(i as u32).to_le_bytes(), None).unwrap();
        }
        l.sign_now().unwrap();
        (l, key.public())
    }

    #[test]
    fn four_entry_paths_have_two_steps() {
        let (l, pk) = ledger_with(4);
        for s in 0..4 {
            let r = l.get_receipt(s).unwrap();
            assert_eq!(r.proof_path.len(), 2);
            assert!(verify_receipt(&r, &pk));
        }
    }

    #[test]
    fn flipped_entry_digest_is_rejected() {
        let (l, pk) = ledger_with(4);
        let mut r = l.get_receipt(2).unwrap();
        r.entry_digest.0[0] ^= 1;
        assert!(!verify_receipt(&r, &pk));
    }

    #[test]
    fn seqno_must_match_path_position() {
        let (l, pk) = ledger_with(8);
        let mut r = l.get_receipt(5).unwrap();
        r.seqno = 4;
        assert!(!verify_receipt(&r, &pk));
    }

    #[test]
    fn untrusted_identity_is_rejected_even_if_self_consistent() {
        let (l, _) = ledger_with(3);
        let r = l.get_receipt(1).unwrap();
        let other = KeyPair::from_seed([4u8; 32]).public();
        assert!(!verify_receipt(&r, &other));
    }

    #[test]
    fn canonical_bytes_round_trip_and_reject_trailing_data() {
        let (l, pk) = ledger_with(5);
        let r = l.get_receipt(4).unwrap();
        let mut bytes = r.to_bytes();
        assert_eq!(Receipt::from_bytes(&bytes).unwrap(), r);
        assert!(verify_receipt_bytes(&bytes, &pk));
        bytes.push(0);
        assert!(!verify_receipt_bytes(&bytes, &pk));
    }
}
