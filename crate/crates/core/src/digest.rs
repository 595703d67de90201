//! Content hashes for run provenance.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serialisable config");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = config_hash(&serde_json::json!({"x": 1.5, "y": [1, 2]}));
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1.5, "y": [1, 2]})));
        assert_ne!(a, config_hash(&serde_json::json!({"x": 1.5, "y": [1, 3]})));
        assert_eq!(a.len(), 64);
    }
}
