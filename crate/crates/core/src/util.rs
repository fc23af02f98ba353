//! Hashing helpers shared across modules: model fingerprints, dataset
//! content hashes, and config hashes all use SHA-256 rendered as lowercase
//! hex.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_bytes(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Hash of a serde-serializable config via its canonical JSON encoding.
/// Struct field order is fixed, so the encoding is deterministic.
pub fn config_hash<T: serde::Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serialization cannot fail");
    sha256_hex(json.as_bytes())
}

/// Incremental SHA-256 writer for streaming larger payloads.
pub struct HashWriter {
    hasher: Sha256,
}

impl Default for HashWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl HashWriter {
    pub fn new() -> Self {
        HashWriter { hasher: Sha256::new() }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.hasher.update(bytes);
    }

    pub fn update_f64s(&mut self, values: &[f64]) {
        for v in values {
            self.hasher.update(v.to_le_bytes());
        }
    }

    pub fn finish_hex(self) -> String {
        let digest = self.hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hash_writer_matches_one_shot() {
        let mut w = HashWriter::new();
        w.update(b"ab");
        w.update(b"c");
        assert_eq!(w.finish_hex(), sha256_hex(b"abc"));
    }
}
