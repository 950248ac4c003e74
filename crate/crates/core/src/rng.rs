//! Seeded PRNG streams.
//!
//! Every random draw in the crate goes through a [`SplitMix64`] stream whose
//! seed is either supplied by the caller or derived from a parent seed plus a
//! tag. Derivation is a pure function, so substreams never depend on how much
//! of a sibling stream has been consumed.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

/// Opens a stream at `seed`.
pub fn stream(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// SplitMix64 output finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a numeric tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

/// Derives a child seed from `seed` and a string tag (FNV-1a of the bytes).
pub fn derive_str(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive(seed, h)
}
