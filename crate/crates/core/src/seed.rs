//! Named random sub-streams derived from one run seed.
//!
//! Every stochastic step asks for its own stream (`"init"`, `"dropout"`,
//! `"sampling"`, ...) so stages can be rerun independently and still draw
//! the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an integer into a seed.
pub fn mix(seed: u64, value: u64) -> u64 {
    splitmix64(seed ^ splitmix64(value))
}

/// Seed for the named stream.
pub fn derive(seed: u64, stream: &str) -> u64 {
    // FNV-1a over the name, then mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix(seed, h)
}

/// Generator for the named stream.
pub fn rng(seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream))
}

/// Generator for the named stream further keyed by an integer
/// (an epoch, a node index, a snapshot).
pub fn rng_keyed(seed: u64, stream: &str, key: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(derive(seed, stream), key))
}
