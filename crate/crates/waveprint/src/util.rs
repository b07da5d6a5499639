//! Deterministic hashing and random-number helpers.
//!
//! Every stochastic choice in the library flows through a ChaCha8 stream
//! seeded from an experiment seed plus a context string, so independent
//! stages (corpus synthesis, weight init, batch shuffling, perturbation)
//! draw from decoupled streams and reruns reproduce bit-identical output.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// FNV-1a 64-bit hash. Stable across platforms and releases; used for
/// seed derivation and config fingerprints, never for security.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a parent seed and a context label.
///
/// The label keeps streams for different purposes decoupled even when
/// they share the parent seed.
pub fn derive_seed(parent: u64, context: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + context.len());
    buf.extend_from_slice(&parent.to_le_bytes());
    buf.extend_from_slice(context.as_bytes());
    fnv1a64(&buf)
}

/// Creates a ChaCha8 stream for `context` under `parent`.
pub fn rng_for(parent: u64, context: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, context))
}

/// Uniform f64 in [0, 1) with 53-bit resolution.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform f64 in [lo, hi).
pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Standard normal via Box-Muller. One draw per call; the spare value is
/// discarded so output depends only on stream position, not call pairing.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // u1 in (0, 1] so ln(u1) is finite.
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform integer in [0, n). `n` must be positive.
pub fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    // Modulo bias is < 2^-40 for every n used here (all far below 2^24).
    (rng.next_u64() % n as u64) as usize
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
