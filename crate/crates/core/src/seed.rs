//! Counter-based seed derivation.
//!
//! Every stage seed is the first eight bytes (little endian) of
//! `SHA-256(master_seed_le || label || counter_le)`. Stages can therefore be
//! re-run independently and the resampling protocol gets as many
//! independent, reproducible streams as it needs.

use sha2::{Digest, Sha256};

pub fn derive(master: u64, label: &str, counter: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update(counter.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// SplitMix64 step, used to derive per-item streams inside a stage.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
