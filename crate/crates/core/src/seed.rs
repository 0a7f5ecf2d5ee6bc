//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a seed derived here, so results are a pure function of
//! the run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes `base` with a sequence of components (epoch, sample index, ...)
/// into a new 64-bit seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix(base ^ 0x5eed_0000_0000_0000);
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// Stream tags keep seeds for different purposes apart.
pub const TAG_INIT: u64 = 1;
pub const TAG_SHUFFLE: u64 = 2;
pub const TAG_JITTER: u64 = 3;
pub const TAG_MASK: u64 = 4;
pub const TAG_HEAD: u64 = 5;
pub const TAG_SUBSET: u64 = 6;
