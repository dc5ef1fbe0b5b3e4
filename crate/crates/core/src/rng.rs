//! Seeded, splittable pseudo-randomness.
//!
//! Every random draw in the simulator goes through [`SeededRng`], a thin
//! wrapper over ChaCha8 keyed by a 64-bit seed and selecting one of 2^64
//! independent keystreams. Child streams for a `(round, client)` pair are
//! derived with [`SeededRng::derive`], so parallel client training never
//! shares generator state.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream tags for the distinct consumers of randomness in a run.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PROXY: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const SAMPLING: u64 = 6;
    pub const LOCAL: u64 = 7;
    pub const SERVER: u64 = 8;
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on a stream determined by this one's identity and
    /// `tags`. Independent of how many values have been drawn from `self`.
    pub fn derive(&self, tags: &[u64]) -> SeededRng {
        let mut h = splitmix64(self.stream ^ 0x5bd1_e995_u64.rotate_left(17));
        for &t in tags {
            h = splitmix64(h ^ splitmix64(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        SeededRng::new(self.seed, h)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift with rejection; exact and portable.
        let n = n as u64;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n as u128);
            let lo = m as u64;
            if lo >= n || lo >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct values from `0..n`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
