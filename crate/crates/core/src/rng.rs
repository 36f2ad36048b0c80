//! Seed derivation and seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] whose seed is
//! obtained by folding purpose tags and counters into a parent seed with
//! [`mix`] (the SplitMix64 finaliser). Records, steps, and noise images are
//! therefore independently reproducible: no stream is shared between two
//! consumers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SeededRng = ChaCha8Rng;

/// SplitMix64 finaliser applied to `seed + GOLDEN * (salt + 1)`.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(salt.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Purpose tags used with [`derive`]. Values are part of the on-disk
/// reproducibility contract; do not renumber.
pub mod purpose {
    pub const CORPUS: u64 = 0x01;
    pub const DEGRADE: u64 = 0x02;
    pub const TRAIN: u64 = 0x03;
    pub const SAMPLE: u64 = 0x04;
    pub const EDIT: u64 = 0x05;
    pub const INIT: u64 = 0x06;
    pub const ENCODER: u64 = 0x07;
    pub const EVAL: u64 = 0x08;
    pub const FORGE: u64 = 0x09;
}

/// Derives a child seed for `(purpose, index)`.
pub fn derive(seed: u64, purpose: u64, index: u64) -> u64 {
    mix(mix(seed, purpose), index)
}

pub fn rng_from(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut SeededRng) -> f32 {
    StandardNormal.sample(rng)
}

/// `n` standard-normal draws.
pub fn gaussian_vec(rng: &mut SeededRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| gaussian(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_is_stable() {
        // Frozen: changing these breaks every stored manifest.
        assert_eq!(mix(0, 0), 0xE220_A839_7B1D_CDAF);
        assert_ne!(mix(1, 0), mix(0, 1));
    }

    #[test]
    fn derived_streams_differ() {
        let a = gaussian_vec(&mut rng_from(derive(7, purpose::SAMPLE, 0)), 8);
        let b = gaussian_vec(&mut rng_from(derive(7, purpose::SAMPLE, 1)), 8);
        let a2 = gaussian_vec(&mut rng_from(derive(7, purpose::SAMPLE, 0)), 8);
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}
