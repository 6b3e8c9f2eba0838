//! Seeded random streams.
//!
//! Every stochastic component draws from [`SimRng`], a ChaCha20 stream cipher
//! generator (`rand_chacha` 0.9) keyed by `(seed, stream_id)`:
//!
//! * key: the 64-bit seed in little-endian order in bytes 0..8, zeros elsewhere;
//! * stream: `stream_id` via `set_stream`, word position 0.
//!
//! Derived draws are defined here so that any ChaCha20 implementation can
//! reproduce them bit-exactly:
//!
//! * `uniform`: `(next_u64 >> 11) * 2^-53`, in `[0, 1)`;
//! * `index(n)`: `floor(uniform * n)`, clamped to `n - 1`;
//! * `gaussian`: Box–Muller cosine branch with `u1 = 1 - uniform`, `u2 = uniform`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Stream ids used across the crate. Distinct components never share a stream.
pub mod streams {
    pub const FEDFT_DATA: u64 = 1;
    pub const FEDFT_INIT: u64 = 2;
    pub const UNLEARN_DATA: u64 = 10;
    pub const UNLEARN_INIT: u64 = 11;
    /// DP noise for round `r` uses `UNLEARN_DP_BASE + r`.
    pub const UNLEARN_DP_BASE: u64 = 1 << 20;
    pub const MOE_GATE: u64 = 20;
    pub const MOE_ARRIVALS: u64 = 21;
    pub const FADING: u64 = 30;
    pub const COT_SEARCH: u64 = 40;
    pub const COT_INSTANCE: u64 = 41;
}

#[derive(Clone, Debug)]
pub struct SimRng {
    inner: ChaCha20Rng,
}

impl SimRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(stream_id);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a nonempty range");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher–Yates shuffle driven by `index`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
