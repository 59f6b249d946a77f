//! Seed plumbing. Every stochastic component derives its own stream from the
//! experiment seed and a purpose tag, so subsystems can be reordered or run
//! independently without perturbing each other's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from `(seed, tag, index)` with an FNV-1a mix.
/// Stable across platforms and crate versions.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf29ce484222325;
    const FNV_PRIME: u64 = 0x100000001b3;
    let mut h = FNV_OFFSET ^ seed;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    for b in index.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    // final avalanche (splitmix64 tail)
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Seeded generator for a named stream.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

/// One standard-normal draw (Box-Muller on explicit uniforms, so the mapping
/// from generator output to sample is pinned by this crate, not by `rand`).
pub fn next_gaussian<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            let r = (-2.0 * u1.ln()).sqrt();
            return r * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Fills a slice with standard-normal draws.
pub fn fill_gaussian<R: Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = next_gaussian(rng);
    }
}

/// In-place Fisher-Yates shuffle with a pinned algorithm.
pub fn shuffle<R: Rng, T>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
