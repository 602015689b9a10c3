//! Seed derivation and stable hashing.
//!
//! Every random choice in an experiment flows from one root seed, fanned out
//! by labeled derivation so components (data generation, particle init,
//! attack noise, epoch shuffling) can be varied independently without
//! perturbing each other. The derivation is a fixed algorithm, not
//! `std::hash`, so streams are stable across platforms and Rust versions.

/// FNV-1a 64-bit hash. Also used for file checksums and config digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 mixing step.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed, a stream label and an index.
///
/// Distinct labels (and distinct indices under one label) give independent
/// streams: `derive(s, "attack", step)` never collides with
/// `derive(s, "shuffle", epoch)` in practice.
pub fn derive(root: u64, label: &str, index: u64) -> u64 {
    let mixed = splitmix64(root ^ fnv1a64(label.as_bytes()));
    splitmix64(mixed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}
