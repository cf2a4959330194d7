//! 64-bit content checksums (SHA-256 truncated to the first 8 bytes).
//!
//! Used for dataset manifests and model checkpoints. Truncation keeps the
//! on-disk footprint at a single u64 while still making silent corruption
//! (any flipped byte) detectable in practice.

use sha2::{Digest, Sha256};

/// Incremental checksum over a byte stream.
pub struct Checksum {
    hasher: Sha256,
}

impl Checksum {
    pub fn new() -> Self {
        Checksum {
            hasher: Sha256::new(),
        }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.hasher.update(bytes);
    }

    /// First 8 bytes of the SHA-256 digest, little-endian.
    pub fn finish(self) -> u64 {
        let digest = self.hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest >= 8 bytes"))
    }
}

impl Default for Checksum {
    fn default() -> Self {
        Self::new()
    }
}

/// One-shot checksum of a byte slice.
pub fn checksum_bytes(bytes: &[u8]) -> u64 {
    let mut c = Checksum::new();
    c.update(bytes);
    c.finish()
}

/// One-shot checksum of an f64 slice (little-endian bit patterns).
///
/// Bitwise: two parameter vectors hash equal iff every float is bit-identical.
pub fn checksum_f64s(values: &[f64]) -> u64 {
    let mut c = Checksum::new();
    for v in values {
        c.update(&v.to_le_bytes());
    }
    c.finish()
}
