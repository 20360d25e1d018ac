//! Seed derivation for reproducible parallel sampling.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a 64-bit
//! key obtained by folding a list of integers into a master seed with the
//! SplitMix64 finaliser. Streams keyed by `(seed, h, s, a, replicate)` make
//! parallel and serial runs produce identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `key` into `seed`: `k_0 = seed`, `k_{i+1} = splitmix64(k_i ^ splitmix64(key_i + 1))`.
pub fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    key.iter().fold(splitmix64(seed), |acc, &k| {
        splitmix64(acc ^ splitmix64(k.wrapping_add(1)))
    })
}

pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}

/// Stream tags that keep independent uses of one seed apart.
pub mod tag {
    pub const ANCHORS: u64 = 0xA1;
    pub const CELL: u64 = 0xC3;
    pub const GENERATOR: u64 = 0x6E;
    pub const REPLICATE: u64 = 0x7E;
    pub const NOISE: u64 = 0x40;
}
