//! Confidential consortium ledger core.
//!
//! A replicated, append-only Merkle ledger with governance by a member
//! consortium, emulated enclave attestation for node admission, and a
//! wholesale CBDC settlement application.
//!
//! The enclave here is a software emulation: platform keys are ordinary
//! in-process keys and provide no hardware isolation.

pub mod codec;
pub mod crypto;
pub mod ledger;
pub mod enclave;
pub mod consensus;
pub mod governance;
pub mod settlement;
pub mod service;
pub mod testkit;
