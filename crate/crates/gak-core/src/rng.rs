//! Seed derivation and normal sampling.
//!
//! Every stochastic stage of the pipeline owns a named substream derived from
//! the session seed, so adding a consumer never perturbs the draws of another.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the tag bytes; stable across platforms.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic substream: the same (seed, tag, index) always yields the
/// same generator, independent of call order elsewhere in the program.
pub fn substream(seed: u64, tag: &str, index: u64) -> ChaCha12Rng {
    let mixed = splitmix(seed ^ fnv1a(tag.as_bytes()).rotate_left(17) ^ splitmix(index));
    ChaCha12Rng::seed_from_u64(mixed)
}

/// Standard normal draw via Box-Muller. Avoids distribution crates so the
/// byte stream -> sample mapping is pinned by this crate alone.
pub fn next_standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    // gen::<f64>() is uniform on [0, 1); shift to (0, 1] so ln() is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
