//! Seeded randomness helpers.
//!
//! Every stochastic operation in this crate derives its stream from an
//! explicit `u64` seed via ChaCha8, so results are reproducible across
//! platforms.

pub use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Deterministic RNG stream for a given seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a sub-stream from a parent seed and a purpose tag, so independent
/// uses of the same run seed do not share a stream.
pub fn substream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Uniform f64 in [0, 1).
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    // 53 random mantissa bits.
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in [0, n). Rejection-sampled, unbiased.
pub fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "uniform_index over empty range");
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = loop {
        let u = uniform(rng);
        if u > 0.0 {
            break u;
        }
    };
    let u2 = uniform(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// Sample `k` distinct positions from [0, n) without replacement.
pub fn sample_without_replacement(rng: &mut ChaCha8Rng, n: usize, k: usize) -> alloc::vec::Vec<usize> {
    assert!(k <= n);
    let mut pool: alloc::vec::Vec<usize> = (0..n).collect();
    shuffle(rng, &mut pool);
    pool.truncate(k);
    pool
}
