//! Seeded randomness. Every random draw in the crate goes through a
//! [`SeedRng`], and independent work items get independent streams via
//! [`SeedRng::derive`], so results never depend on execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct SeedRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by label. Independent of how many draws were made
    /// from `self`, so sibling streams cannot interfere.
    pub fn derive(&self, label: &str) -> SeedRng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(label.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        SeedRng::new(u64::from_le_bytes(bytes))
    }

    /// Child stream keyed by label and index, for per-item substreams.
    pub fn derive_indexed(&self, label: &str, index: u64) -> SeedRng {
        self.derive(&format!("{label}#{index}"))
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal_scaled<T: Scalar>(&mut self, std: f64) -> T {
        T::from_f64(self.normal() * std)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices drawn from `[0, n)`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct indices from {n}");
        let mut all: Vec<usize> = (0..n).collect();
        self.shuffle(&mut all);
        all.truncate(k);
        all
    }

    pub fn choose<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len())]
    }
}
