//! Seeded random streams.
//!
//! Every random draw in the engine goes through [`DrumRng`], a thin wrapper
//! over ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`). Only the raw
//! `u64` stream is consumed; the derived draws are defined here so another
//! implementation can reproduce them from the same ChaCha8 stream:
//!
//! - `uniform()`: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! - `below(n)`: `next_u64() % n`.
//! - `normal()`: Box–Muller on two uniforms, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`;
//!   the sine branch is discarded so each normal costs exactly two words.
//! - `shuffle(xs)`: Fisher–Yates from the back, `j = below(i + 1)` for
//!   `i = len-1 ..= 1`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct DrumRng {
    inner: ChaCha8Rng,
}

impl DrumRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// First `k` entries of a seeded shuffle of `0..n`.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx
    }
}
