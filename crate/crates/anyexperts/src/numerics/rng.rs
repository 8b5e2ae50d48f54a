//! Deterministic counter-based RNG.
//!
//! ChaCha8 is counter-based and platform-independent: the same seed yields
//! the same stream everywhere, and the counter position can be captured and
//! restored exactly, which checkpoints rely on.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded, restorable random source. Identical seed => identical stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            stream: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from the same seed. Streams never collide,
    /// so adding a consumer cannot perturb existing ones.
    pub fn derive(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng {
            seed: self.seed,
            stream,
            inner,
        }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// (seed, stream, word position) — enough to restore exactly.
    pub fn state(&self) -> (u64, u64, u128) {
        (self.seed, self.stream, self.inner.get_word_pos())
    }

    pub fn restore(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        inner.set_word_pos(word_pos);
        Rng {
            seed,
            stream,
            inner,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let base = Rng::new(7);
        let mut a = base.derive(1);
        let mut b = base.derive(2);
        assert_ne!(a.uniform().to_bits(), b.uniform().to_bits());
    }

    #[test]
    fn restore_resumes_exactly() {
        let mut a = Rng::new(9).derive(3);
        for _ in 0..17 {
            a.uniform();
        }
        let (seed, stream, pos) = a.state();
        let mut b = Rng::restore(seed, stream, pos);
        for _ in 0..50 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }
}
