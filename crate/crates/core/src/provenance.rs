//! Identification stamped into every artifact.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL: &str = concat!("lsr ", env!("CARGO_PKG_VERSION"));

/// SHA-256 of the JSON form of `value`, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// SHA-256 of raw bytes, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&(1, "x"));
        assert_eq!(a, config_hash(&(1, "x")));
        assert_ne!(a, config_hash(&(2, "x")));
        assert_eq!(a.len(), 64);
    }
}
