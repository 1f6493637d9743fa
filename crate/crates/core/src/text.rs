//! Small text and hashing helpers shared across modules.

use sha2::{Digest, Sha256};

/// Trims and collapses every whitespace run to a single space.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercases, splits on non-alphanumeric characters and keeps tokens of
/// at least two characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .collect()
}

/// SHA-256 over length-prefixed parts, as lowercase hex.
pub fn stable_hash_hex(parts: &[&str]) -> String {
    hex::encode(digest_parts(parts))
}

/// First eight bytes of [`stable_hash_hex`] as a little-endian integer.
pub fn stable_hash64(parts: &[&str]) -> u64 {
    let digest = digest_parts(parts);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn digest_parts(parts: &[&str]) -> Vec<u8> {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.finalize().to_vec()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
