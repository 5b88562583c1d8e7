//! Seeded random streams.
//!
//! Every random decision in the toolkit draws from a ChaCha8 stream whose seed
//! is derived from a user seed plus a small tuple of stream coordinates
//! (worker, iteration, row, ...). ChaCha8 output is specified independently
//! of the platform, so mask sequences are reproducible everywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Identity of the generator, echoed into run configs and checkpoints.
pub const RNG_IDENTITY: &str = "rand_chacha::ChaCha8Rng/0.3 seed_from_u64+splitmix64";

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-stream seed from a base seed and a list of coordinates.
pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(mix64(seed), |acc, &c| mix64(acc ^ mix64(c)))
}

pub fn derived(seed: u64, coords: &[u64]) -> Rng {
    seeded(derive_seed(seed, coords))
}

/// Stable 64-bit FNV-1a hash for string tags (model names etc.).
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
