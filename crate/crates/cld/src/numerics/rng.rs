//! Seeded, splittable randomness. Every stochastic choice in the crate flows
//! through an explicitly threaded [`DetRng`]; there is no global RNG state.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mix a base seed with a tag to derive an independent child seed
/// (SplitMix64 finalizer). Same inputs give the same output on every platform.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic counter-based generator (ChaCha8) behind a small facade.
#[derive(Debug, Clone)]
pub struct DetRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator keyed by `tag`; does not disturb this stream.
    /// Distinct tags give independent children of the same parent.
    pub fn split(&self, tag: u64) -> Self {
        DetRng::new(derive_seed(self.seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.inner.random_range(lo..hi)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        self.inner.random_range(0.0..1.0) < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from [0, n) excluding `exclude`, uniform without
    /// replacement. Draw order is part of the deterministic contract.
    pub fn sample_excluding(&mut self, n: usize, k: usize, exclude: usize) -> Vec<usize> {
        debug_assert!(exclude < n && k < n);
        let picked = rand::seq::index::sample(&mut self.inner, n - 1, k);
        picked
            .into_iter()
            .map(|j| if j >= exclude { j + 1 } else { j })
            .collect()
    }

    /// Weighted index draw by cumulative inversion. Weights must be
    /// non-negative; returns None when the total mass is zero.
    pub fn weighted_index(&mut self, weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let t = self.uniform(0.0, total);
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if t < acc {
                return Some(i);
            }
        }
        Some(weights.len() - 1)
    }
}
