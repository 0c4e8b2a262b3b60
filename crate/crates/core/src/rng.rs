//! Counter-based rng substreams.
//!
//! Every stochastic draw is keyed by a tuple of integers (seed, epoch, sample
//! index, ...) rather than by the order in which workers happen to run, so
//! serial and parallel execution produce identical streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit stream key from a base seed and a path of indices.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    let mut h = mix(seed.wrapping_add(GOLDEN));
    for &p in path {
        h = mix(h ^ mix(p.wrapping_add(GOLDEN)));
    }
    h
}

pub fn substream(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, path))
}
