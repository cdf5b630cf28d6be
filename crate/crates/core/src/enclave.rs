//! Emulated trusted execution environment.
//!
//! NOT SECURE: a [`Platform`] is an in-process key pair plus a sealing secret
//! standing in for a hardware root of trust. It reproduces the protocol
//! surface (measurement, quotes, sealing) so admission and confidentiality
//! rules can be exercised, nothing more.
//!
//! Encodings:
//!
//! ```text
//! quote       := measurement[32] || node_identity[32] || str platform_id || u32 64 || signature[64]
//! quote body  := measurement[32] || node_identity[32]          (what the platform signs)
//! sealed blob := measurement[32] || nonce[12] || bytes ciphertext
//! seal key    := HKDF-SHA256(ikm = platform secret, salt = measurement, info = "conledger/seal/v1")
//! ```

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{self, random_nonce, Digest, KeyPair, PublicKey, Signature, SymmetricKey, NONCE_LEN};

const SEAL_INFO: &[u8] = b"conledger/seal/v1";
const WRAP_INFO: &[u8] = b"conledger/wrap/v1";

/// Code identity: SHA-256 of a code blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Measurement(pub Digest);

pub fn measure(code_blob: &[u8]) -> Measurement {
    Measurement(crypto::hash(code_blob))
}

/// The measured blob for a node: its application policy bytes and build id.
pub fn code_blob(policy: &[u8], build_id: &str) -> Vec<u8> {
    let mut e = Encoder::new();
    e.bytes(policy).str(build_id);
    e.finish()
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EnclaveError {
    #[error("sealed data failed authentication")]
    Authentication,
    #[error("malformed enclave artifact: {0}")]
    Malformed(String),
}

/// An emulated TEE platform: attestation signing key plus sealing secret.
#[derive(Clone)]
pub struct Platform {
    id: String,
    key: KeyPair,
    secret: [u8; 32],
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform").field("id", &self.id).field("key", &self.key.public()).finish()
    }
}

impl Platform {
    pub fn generate<R: RngCore + CryptoRng>(id: impl Into<String>, rng: &mut R) -> Self {
        let key = KeyPair::generate(rng);
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        Platform { id: id.into(), key, secret }
    }

    pub fn from_parts(id: impl Into<String>, key_seed: [u8; 32], secret: [u8; 32]) -> Self {
        Platform { id: id.into(), key: KeyPair::from_seed(key_seed), secret }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public()
    }

    pub fn key_seed(&self) -> [u8; 32] {
        self.key.seed()
    }

    pub fn secret(&self) -> [u8; 32] {
        self.secret
    }

    fn seal_key(&self, m: &Measurement) -> SymmetricKey {
        SymmetricKey::derive(&self.secret, &m.0 .0, SEAL_INFO)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationQuote {
    pub measurement: Measurement,
    pub node_identity: PublicKey,
    pub platform_id: String,
    pub signature: Signature,
}

fn quote_body(m: &Measurement, node: &PublicKey) -> [u8; 64] {
    let mut b = [0u8; 64];
    b[..32].copy_from_slice(&m.0 .0);
    b[32..].copy_from_slice(&node.0);
    b
}

impl Canonical for AttestationQuote {
    fn encode(&self, e: &mut Encoder) {
        e.digest(&self.measurement.0)
            .public_key(&self.node_identity)
            .str(&self.platform_id)
            .bytes(&self.signature.0);
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let measurement = Measurement(d.digest()?);
        let node_identity = d.public_key()?;
        let platform_id = d.string()?;
        let sig = d.bytes()?;
        let signature = Signature::from_slice(sig).map_err(|_| d.invalid("signature length"))?;
        Ok(AttestationQuote { measurement, node_identity, platform_id, signature })
    }
}

pub fn quote(measurement: Measurement, node_identity: PublicKey, platform: &Platform) -> AttestationQuote {
    let signature = platform.key.sign(&quote_body(&measurement, &node_identity));
    AttestationQuote {
        measurement,
        node_identity,
        platform_id: platform.id.clone(),
        signature,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    UnknownPlatform,
    UntrustedCode,
    BadSignature,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuoteVerdict {
    Accept,
    Reject(RejectReason),
}

/// Accepts iff the quote's platform is trusted, its signature verifies under
/// that platform's key, and its measurement is trusted.
pub fn verify_quote(
    q: &AttestationQuote,
    trusted_measurements: &BTreeSet<Measurement>,
    trusted_platforms: &BTreeMap<String, PublicKey>,
) -> QuoteVerdict {
    let Some(platform_key) = trusted_platforms.get(&q.platform_id) else {
        return QuoteVerdict::Reject(RejectReason::UnknownPlatform);
    };
    if platform_key
        .verify(&quote_body(&q.measurement, &q.node_identity), &q.signature)
        .is_err()
    {
        return QuoteVerdict::Reject(RejectReason::BadSignature);
    }
    if !trusted_measurements.contains(&q.measurement) {
        return QuoteVerdict::Reject(RejectReason::UntrustedCode);
    }
    QuoteVerdict::Accept
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub measurement: Measurement,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl Canonical for SealedBlob {
    fn encode(&self, e: &mut Encoder) {
        e.digest(&self.measurement.0).fixed(&self.nonce).bytes(&self.ciphertext);
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(SealedBlob {
            measurement: Measurement(d.digest()?),
            nonce: d.fixed()?,
            ciphertext: d.bytes()?.to_vec(),
        })
    }
}

pub fn seal<R: RngCore + CryptoRng>(
    data: &[u8],
    measurement: &Measurement,
    platform: &Platform,
    rng: &mut R,
) -> SealedBlob {
    let nonce = random_nonce(rng);
    let ciphertext = platform.seal_key(measurement).encrypt(&nonce, &measurement.0 .0, data);
    SealedBlob { measurement: *measurement, nonce, ciphertext }
}

pub fn unseal(blob: &SealedBlob, measurement: &Measurement, platform: &Platform) -> Result<Vec<u8>, EnclaveError> {
    platform
        .seal_key(measurement)
        .decrypt(&blob.nonce, &measurement.0 .0, &blob.ciphertext)
        .map_err(|_| EnclaveError::Authentication)
}

/// X25519 key used to receive service secrets when joining.
pub struct ExchangeKey(x25519_dalek::StaticSecret);

impl ExchangeKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; 32];
        rng.fill_bytes(&mut b);
        ExchangeKey(x25519_dalek::StaticSecret::from(b))
    }

    pub fn public(&self) -> [u8; 32] {
        x25519_dalek::PublicKey::from(&self.0).to_bytes()
    }
}

/// Secret encrypted to a joining node's exchange key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrappedSecret {
    pub ephemeral: String,
    pub nonce: String,
    pub ciphertext: String,
}

pub fn wrap_secret<R: RngCore + CryptoRng>(recipient: &[u8; 32], secret: &[u8], rng: &mut R) -> WrappedSecret {
    let eph = ExchangeKey::generate(rng);
    let shared = eph.0.diffie_hellman(&x25519_dalek::PublicKey::from(*recipient));
    let key = SymmetricKey::derive(shared.as_bytes(), &eph.public(), WRAP_INFO);
    let nonce = random_nonce(rng);
    WrappedSecret {
        ephemeral: hex::encode(eph.public()),
        nonce: hex::encode(nonce),
        ciphertext: hex::encode(key.encrypt(&nonce, recipient, secret)),
    }
}

pub fn unwrap_secret(own: &ExchangeKey, w: &WrappedSecret) -> Result<Vec<u8>, EnclaveError> {
    let bad = |what: &str| EnclaveError::Malformed(what.to_string());
    let eph: [u8; 32] = hex::decode(&w.ephemeral)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("ephemeral key"))?;
    let nonce: [u8; NONCE_LEN] = hex::decode(&w.nonce)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("nonce"))?;
    let ct = hex::decode(&w.ciphertext).map_err(|_| bad("ciphertext"))?;
    let shared = own.0.diffie_hellman(&x25519_dalek::PublicKey::from(eph));
    let key = SymmetricKey::derive(shared.as_bytes(), &eph, WRAP_INFO);
    key.decrypt(&nonce, &own.public(), &ct).map_err(|_| EnclaveError::Authentication)
}
