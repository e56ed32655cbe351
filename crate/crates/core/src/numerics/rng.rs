use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Seeded, counter-based random stream.
///
/// Streams are never shared between concerns: fold shuffling, dropout masks,
/// initialization noise and so on each draw from their own
/// [`substream`](Rng::substream), keyed by a purpose label and an index, so
/// adding draws to one concern never perturbs another.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha12Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::from_seed(derive_key(seed, "root", 0)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for `(purpose, index)`; depends only on the root
    /// seed, not on how much of this stream has been consumed.
    pub fn substream(&self, purpose: &str, index: u64) -> Rng {
        let key = derive_key(self.seed, purpose, index);
        let mut folded = [0u8; 8];
        folded.copy_from_slice(&key[..8]);
        Rng {
            seed: u64::from_le_bytes(folded),
            inner: ChaCha12Rng::from_seed(key),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

fn derive_key(seed: u64, purpose: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_ignore_parent_position() {
        let a = Rng::new(3);
        let mut b = Rng::new(3);
        b.next_u64();
        assert_eq!(
            a.substream("dropout", 4).next_u64(),
            b.substream("dropout", 4).next_u64()
        );
        assert_ne!(
            a.substream("dropout", 4).next_u64(),
            a.substream("dropout", 5).next_u64()
        );
        assert_ne!(
            a.substream("dropout", 4).next_u64(),
            a.substream("folds", 4).next_u64()
        );
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(11);
        let xs: Vec<f64> = (0..20_000).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }
}
