//! Seeded random source.
//!
//! Every stochastic routine takes an explicit [`Rng`]; there is no global
//! generator. The stream is ChaCha8 (`rand_chacha::ChaCha8Rng`) keyed through
//! `SeedableRng::seed_from_u64`, which is specified bit-for-bit and therefore
//! reproducible across platforms.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const RNG_ALGORITHM: &str = "chacha8 (rand_chacha 0.9, seed_from_u64)";

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent generator for a named sub-stream of `seed`.
    pub fn derived(seed: u64, stream: u64) -> Self {
        Self::new(mix_seed(seed, stream))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        Normal::new(mean, std_dev)
            .expect("standard deviation must be finite and non-negative")
            .sample(&mut self.inner)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    /// A random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// SplitMix64 finaliser over `(seed, stream)`; used to derive sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
