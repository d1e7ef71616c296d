//! Keyed, counter-based random streams.
//!
//! Every random quantity in the simulator is a pure function of
//! `(master seed, stream tag, entity ids...)`, so generation can be split
//! across threads in any order and still reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Distinct tags give independent streams for the same ids.
pub mod stream {
    pub const DESIGN: u64 = 0x01;
    pub const LATENT: u64 = 0x02;
    pub const BOOKLET: u64 = 0x03;
    pub const RESPONSE: u64 = 0x04;
    pub const NONRESPONSE: u64 = 0x05;
    pub const OUTCOME: u64 = 0x06;
    pub const TRANSIENT: u64 = 0x07;
    pub const SITTING: u64 = 0x08;
    pub const DIFFICULTY: u64 = 0x09;
    pub const SORTING: u64 = 0x0a;
    pub const HOLDOUT: u64 = 0x0b;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a seed and a sequence of words into one 64-bit key.
#[inline]
pub fn key(seed: u64, words: &[u64]) -> u64 {
    let mut h = mix64(seed.wrapping_add(GOLDEN));
    for (i, &w) in words.iter().enumerate() {
        h = mix64(h ^ mix64(w.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 2))));
    }
    h
}

/// Uniform draw in `[0, 1)` addressed by `(seed, words)`.
#[inline]
pub fn uniform(seed: u64, words: &[u64]) -> f64 {
    (key(seed, words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A ChaCha stream dedicated to one entity, for draws that need more than
/// a handful of uniforms (normals, shuffles).
pub fn entity_rng(seed: u64, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key(seed, words))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_depend_on_every_word_and_order() {
        let a = key(7, &[1, 2, 3]);
        assert_eq!(a, key(7, &[1, 2, 3]));
        assert_ne!(a, key(8, &[1, 2, 3]));
        assert_ne!(a, key(7, &[1, 2, 4]));
        assert_ne!(a, key(7, &[2, 1, 3]));
        assert_ne!(key(7, &[0]), key(7, &[0, 0]));
    }

    #[test]
    fn uniform_moments() {
        let n = 200_000u64;
        let draws: Vec<f64> = (0..n).map(|i| uniform(11, &[stream::RESPONSE, i])).collect();
        assert!(draws.iter().all(|u| (0.0..1.0).contains(u)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.003);
        assert!((var - 1.0 / 12.0).abs() < 0.002);
    }
}
