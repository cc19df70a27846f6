//! Seedable random source with a fully documented derivation.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`), seeded through
//! `seed_from_u64` and split into independent streams with `set_stream`.
//! Everything built on top of the raw 64-bit words is spelled out here so the
//! same seed reproduces the same masks, augmentations and splits in any
//! implementation of the algorithm:
//!
//! * `uniform()`  = `(next_u64 >> 11) * 2^-53`, a double in `[0, 1)`.
//! * `below(n)`   = `(next_u64 as u128 * n) >> 64` (multiply-high).
//! * `normal()`   = Box-Muller on two `uniform()` draws, cosine branch only.
//! * `stream(seed, tag, index)` seeds with `seed` and selects stream
//!   `fnv1a64(tag) ^ index.rotate_left(17)`.
//! * `hash_unit(bytes)` = `(splitmix64(fnv1a64(bytes)) >> 11) * 2^-53`, used
//!   for hash-based dataset splits.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use std::hash::Hasher;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(seed, tag, index)`, e.g. one per training sample.
    pub fn stream(seed: u64, tag: &str, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stable_hash(tag.as_bytes()) ^ index.rotate_left(17));
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle, iterating from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..n`, in draw order (partial Fisher-Yates).
    pub fn choose_distinct(&mut self, n: usize, count: usize) -> Vec<usize> {
        debug_assert!(count <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }
}

/// FNV-1a 64-bit; used wherever a hash must be stable across runs and platforms.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// SplitMix64 finaliser; spreads every input bit over the whole word, which
/// FNV alone does not do for the high bits of short keys.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// `mix64(stable_hash(bytes))` mapped to a double in `[0, 1)`.
pub fn hash_unit(bytes: &[u8]) -> f64 {
    (mix64(stable_hash(bytes)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
