use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the compact JSON form of `value`. Struct field order is the
/// declaration order and maps are expected to be ordered, so this is stable.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

/// First 12 hex chars of a digest, for directory names and tags.
pub fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}
