//! Seeded random streams.
//!
//! Every consumer of randomness draws from a ChaCha8 stream whose 64-bit seed
//! is derived from `(seed, purpose, indices...)` through SplitMix64 mixing.
//! Streams for different purposes or indices are independent, so the order in
//! which members, points or trials are processed never changes a result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub const TAG_INIT: u64 = 0x696e_6974;
pub const TAG_SHUFFLE: u64 = 0x7368_7566;
pub const TAG_PSEUDO: u64 = 0x7073_6575;
pub const TAG_DATA: u64 = 0x6461_7461;
pub const TAG_SHIFT: u64 = 0x7368_6674;
pub const TAG_MEMBER: u64 = 0x6d65_6d62;
pub const TAG_SIM: u64 = 0x7369_6d75;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a sequence of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
