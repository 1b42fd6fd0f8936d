//! Seeded RNG substreams.
//!
//! All randomness in the crate flows from a single `u64` seed through named
//! substreams, so e.g. drawing more bootstrap resamples never perturbs the
//! permutation stream, and generating a larger training split never changes
//! the test-split embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a deterministic child seed for `(name, index)` under `seed`.
pub fn child_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut s = splitmix64(seed ^ fnv1a(name.as_bytes()));
    s = splitmix64(s ^ splitmix64(index));
    s
}

/// An independently seeded RNG for the named substream.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(seed, name, index))
}
