//! Seeded randomness. Every stochastic routine takes an explicit seed so
//! that outputs are a pure function of `(input, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser, used to derive independent child seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(parent, a, b)`.
pub fn derive_seed(parent: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(parent) ^ a) ^ b.rotate_left(17))
}

/// Standard normal via Box-Muller.
pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2);
        }
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub fn truncated_normal(rng: &mut SeededRng, std: f64) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn bernoulli(rng: &mut SeededRng, p: f64) -> bool {
    rng.gen::<f64>() < p
}
