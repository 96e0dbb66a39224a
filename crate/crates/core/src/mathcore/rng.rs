use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Deterministic random stream.
///
/// Backed by ChaCha20 in counter mode: the 64-bit seed is expanded to the
/// 256-bit key with `SeedableRng::seed_from_u64` (PCG32 expansion), and the
/// keystream is read sequentially from block counter zero. Child streams from
/// [`RngStream::fork`] reuse the key and select a distinct 64-bit ChaCha stream
/// id, so parents and children never share keystream. Gaussian draws use the
/// ziggurat sampler from `rand_distr`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position in the keystream, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Independent child stream labelled by `label`. The child depends only on
    /// `(seed, stream, label)`, never on how much of the parent was consumed.
    pub fn fork(&self, label: u64) -> RngStream {
        let stream = splitmix64(self.stream ^ splitmix64(label.wrapping_add(0x9e37_79b9)));
        Self::with_stream(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// `k` distinct indices from `0..n`, sorted ascending.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = index::sample(&mut self.rng, n, k).into_vec();
        picked.sort_unstable();
        picked
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.counter(), b.counter());
    }

    #[test]
    fn forks_are_independent_of_parent_consumption() {
        let a = RngStream::new(7);
        let mut b = RngStream::new(7);
        b.uniform();
        assert_eq!(a.fork(3).next_u64(), b.fork(3).next_u64());
        assert_ne!(a.fork(3).next_u64(), a.fork(4).next_u64());
        assert_ne!(a.fork(3).next_u64(), RngStream::new(7).next_u64());
    }

    #[test]
    fn choose_indices_distinct_sorted() {
        let mut r = RngStream::new(1);
        let idx = r.choose_indices(16, 4);
        assert_eq!(idx.len(), 4);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < 16));
    }

    #[test]
    fn first_draws_are_pinned() {
        // Guards against silent generator changes in dependencies.
        let mut r = RngStream::new(0);
        assert_eq!(r.next_u64(), 449479075714955186);
        assert_eq!(r.next_u64(), 18115028555707261608);
        assert_eq!(RngStream::new(0).fork(1).next_u64(), 3750736684335639396);
    }
}
