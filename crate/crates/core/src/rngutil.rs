//! Seed derivation for independent, reproducible RNG streams.
//!
//! Each subsystem (batch order, attack noise, mixup draws, ...) gets
//! its own ChaCha stream derived from the run seed and a tag, so
//! schemes that skip a subsystem still consume identical randomness
//! everywhere else.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over the seed and the tag bytes.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = h.wrapping_add(b as u64);
        h = splitmix(h);
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// n draws from U(-bound, bound). Always consumes exactly n uniforms,
/// so a zero bound still advances the stream.
pub fn uniform_symmetric(rng: &mut impl Rng, bound: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
        .collect()
}
