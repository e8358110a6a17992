//! Seeded random streams.
//!
//! The generator is xoshiro256++ with its state filled by splitmix64 from a
//! 64-bit seed. Stream `k` of a seed is the base generator advanced by `k`
//! jumps of 2^128 steps. Conversions:
//!
//! * uniform: `(next_u64 >> 11) · 2^-53`, in `[0, 1)`
//! * normal: Box–Muller on `u1 = 1 − uniform` (in `(0, 1]`) and `u2 = uniform`,
//!   returning `sqrt(−2 ln u1) · cos(2π u2)`; one output per two draws

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Clone, Debug)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn stream(seed: u64, index: u64) -> Self {
        let mut g = Xoshiro256PlusPlus::seed_from_u64(seed);
        for _ in 0..index {
            g.jump();
        }
        Rng(g)
    }

    /// Independent generator keyed by a string label, e.g. a parameter path.
    pub fn keyed(seed: u64, label: &str) -> Self {
        // FNV-1a
        let mut h: u64 = 0xcbf29ce484222325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        Rng::new(seed ^ h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
