//! Deterministic, splittable random streams.
//!
//! A stream is identified by a master seed and a path of substream indices.
//! The generator is ChaCha8 (a counter-based cipher RNG): the 256-bit key is
//! expanded from the master seed and the 64-bit stream id is a SplitMix64 hash
//! of the path. Draws are therefore a pure function of `(seed, path)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn path_id(path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(path.len() as u64), |acc, &i| splitmix64(acc ^ splitmix64(i)))
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_path(seed, Vec::new())
    }

    fn with_path(seed: u64, path: Vec<u64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path_id(&path));
        Self { seed, path, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Child stream at `index`. Depends only on `(seed, path, index)`, never on
    /// how many draws were taken from `self`.
    pub fn substream(&self, index: u64) -> RngStream {
        let mut path = self.path.clone();
        path.push(index);
        Self::with_path(self.seed, path)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        debug_assert!(sd >= 0.0);
        let z: f64 = StandardNormal.sample(&mut self.rng);
        mean + sd * z
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi);
        let u: f64 = self.rng.random();
        lo + (hi - lo) * u
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// `k` distinct indices drawn uniformly from `0..n`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
