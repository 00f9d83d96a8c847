use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Scalar;

/// Environment variable that replaces the default seed of configs and specs.
pub const SEED_ENV: &str = "M2VAE_SEED";

/// `M2VAE_SEED` when set and parseable, else 0.
pub fn default_seed() -> u64 {
    std::env::var(SEED_ENV).ok().and_then(|s| s.trim().parse().ok()).unwrap_or(0)
}

/// Seeded, platform-independent random stream.
///
/// A stream has a single owner. Code that needs independent randomness in
/// parallel derives child streams with [`RngStream::split`].
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `id`; does not advance `self`.
    pub fn split(&self, id: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(id.wrapping_add(0xA5A5_A5A5))))
    }

    pub fn normal<T: Scalar>(&mut self) -> T {
        let v: f64 = self.rng.sample(StandardNormal);
        T::of(v)
    }

    pub fn normals<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform<T: Scalar>(&mut self, lo: f64, hi: f64) -> T {
        T::of(lo + (hi - lo) * self.rng.random::<f64>())
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<E>(&mut self, items: &mut [E]) {
        items.shuffle(&mut self.rng);
    }

    /// `k` distinct indices from `0..n` (all of them if `k >= n`).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, k.min(n)).into_vec()
    }
}
