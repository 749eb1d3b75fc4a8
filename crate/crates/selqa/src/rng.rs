//! Counter-based splittable random number generator.
//!
//! Every random quantity in the crate is a pure function of
//! `(master_seed, stream_id, counter)`. Streams never share state, so
//! stochastic forward passes can run in any order — or in parallel — and
//! produce identical results. Stream ids are derived by hashing labelled
//! key parts, e.g. `(example_id, pass_index)` for Monte Carlo passes.

use serde::{Deserialize, Serialize};

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer: a full-avalanche bijection on u64.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stream id from labelled parts. Order-sensitive.
pub fn stream_id(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64; // arbitrary nonzero start
    for (i, p) in parts.iter().enumerate() {
        h = mix(h ^ p.wrapping_add(GAMMA.wrapping_mul(i as u64 + 1)));
    }
    h
}

/// A single counter-based random stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        RngStream {
            master_seed,
            stream_id,
            counter: 0,
        }
    }

    /// Stream keyed by labelled parts, e.g. `&[example_id, pass_index]`.
    pub fn keyed(master_seed: u64, parts: &[u64]) -> Self {
        RngStream::new(master_seed, stream_id(parts))
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Next raw word: `mix` applied to the (seed, stream, counter) triple.
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        let seeded = mix(self.master_seed.wrapping_add(GAMMA));
        mix(seeded ^ mix(self.stream_id ^ mix(c.wrapping_add(GAMMA))))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw via Box-Muller. Consumes exactly two counter
    /// steps per call so the value is a pure function of the counter.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}
