//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed derived from
//! `(seed, index, purpose tag)` with SplitMix64 mixing, so independent
//! consumers never share a sequence and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a purpose tag.
fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(seed: u64, index: u64, tag: &str) -> u64 {
    let s = splitmix64(seed);
    let s = splitmix64(s ^ index);
    splitmix64(s ^ tag_hash(tag))
}

pub fn stream(seed: u64, index: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index, tag))
}
