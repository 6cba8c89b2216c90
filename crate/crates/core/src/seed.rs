//! Seed fan-out and content digests.

use sha2::{Digest, Sha256};

/// Derives an independent 64-bit seed from a base seed and a label.
///
/// The derivation is a SHA-256 over the label bytes followed by the
/// little-endian base seed, truncated to its first eight bytes.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    hasher.update(base.to_le_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Same as [`derive_seed`] with an additional integer index, e.g. a subset or repeat number.
pub fn derive_indexed_seed(base: u64, label: &str, index: usize) -> u64 {
    derive_seed(base, &format!("{label}#{index}"))
}

/// Short hex digest of arbitrary bytes (first 16 hex chars of SHA-256).
pub fn short_digest(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    hex::encode(&out[..8])
}
