//! Deterministic key derivation so every run of a seeded scenario signs with
//! the same keys.

use ed25519_dalek::SigningKey;
use sha2::{Digest, Sha256};

/// Ed25519 signing key derived from `(seed, label)`.
pub fn derive_signing_key(seed: u64, label: &str) -> SigningKey {
    let mut h = Sha256::new();
    h.update(b"regulus/key/v1");
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    SigningKey::from_bytes(&h.finalize().into())
}
