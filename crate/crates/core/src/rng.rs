//! Seedable generator used for parameter init, data synthesis and shuffling.
//!
//! The stream is PCG-XSH-RR 64/32 (`rand_pcg::Pcg32`): 64-bit LCG state,
//! multiplier 6364136223846793005, per-stream odd increment, 32-bit output by
//! xorshift-high then random rotation. Floats and bounded integers are derived
//! here rather than through `rand` distributions so the sequence is fixed by
//! this file alone.

use rand_core::Rng as _;
use rand_pcg::Pcg32;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Pcg32,
}

const DEFAULT_STREAM: u64 = 0xa02b_dbf7_bb3c_0a7;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, DEFAULT_STREAM)
    }

    /// Independent stream for the same seed, e.g. one per epoch.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Rng {
            inner: Pcg32::new(seed, stream),
        }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        let hi = self.next_u32() as u64;
        let lo = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, bound)` by rejection, free of modulo bias.
    pub fn below(&mut self, bound: u32) -> u32 {
        assert!(bound > 0);
        let zone = u32::MAX - (u32::MAX - bound + 1) % bound;
        loop {
            let v = self.next_u32();
            if v <= zone {
                return v % bound;
            }
        }
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u32 + 1) as usize;
            items.swap(i, j);
        }
    }
}
