//! Deterministic random number plumbing.
//!
//! Every stochastic step in the pipeline draws from a ChaCha8 stream seeded
//! through [`derive`], so results are reproducible bit-for-bit regardless of
//! how work is ordered or parallelized.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used throughout the crate.
pub type DetRng = ChaCha8Rng;

/// Mix a base seed with a purpose tag into an independent stream seed
/// (splitmix64 finalizer).
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, tag: u64) -> DetRng {
    rng_from(derive(seed, tag))
}

/// Standard-normal draw via Box-Muller; two uniforms per call.
pub fn standard_normal(rng: &mut DetRng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 0.0 {
            let r = libm::sqrt(-2.0 * libm::log(u1));
            return r * libm::cos(2.0 * core::f64::consts::PI * u2);
        }
    }
}

/// Uniform draw from `[lo, hi]`; degenerate ranges return `lo` exactly.
pub fn uniform_in(rng: &mut DetRng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    rng.gen_range(lo..hi)
}
