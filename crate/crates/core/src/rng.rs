// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seedable, splittable random stream.
//!
//! The generator is ChaCha8 (RFC 7539 block function, 8 rounds). The 256-bit
//! key is the little-endian encoding of the 64-bit seed followed by 24 zero
//! bytes; a [`Rng::split`] child keeps the key and selects the ChaCha stream
//! (nonce) equal to the split id. Draws are derived as follows:
//!
//! * `next_u64`: two consecutive 32-bit output words, low word first.
//! * `uniform`: `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal`: Box-Muller, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)` from two
//!   uniforms; the sine branch is discarded.
//! * `below(n)`: rejection sampling on `next_u64` against the largest
//!   multiple of `n`, then `% n`.
//! * `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    /// Independent child stream. Splitting is a pure function of
    /// `(seed, id)` and does not advance `self`.
    pub fn split(&self, id: u64) -> Rng {
        Self::with_stream(self.seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut p = self.permutation(n);
        p.truncate(k);
        p
    }

    /// Row-major matrix of `Normal(0, std^2)` draws.
    pub fn normal_tensor(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Tensor::from_vec(rows, cols, data).expect("finite normal draws")
    }
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
    fn split_streams_differ_and_do_not_advance_parent() {
        let parent = Rng::new(3);
        let mut c0 = parent.split(0);
        let mut c1 = parent.split(1);
        assert_ne!(c0.next_u64(), c1.next_u64());
        let mut again = parent.split(1);
        let mut c1b = parent.split(1);
        assert_eq!(again.next_u64(), c1b.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(11);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut r = Rng::new(5);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = Rng::new(1);
        let mut p = r.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
