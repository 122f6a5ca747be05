//! Seeded random source.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`), seeded with
//! `seed_from_u64`, which expands the 64-bit seed with the PCG32 stream
//! documented by `rand_core`. Independent sub-streams use ChaCha's 64-bit
//! stream id. Derived draws:
//!
//! - uniform: 53 random mantissa bits, `[0, 1)` (`rand`'s `StandardUniform`)
//! - open uniform: `(0, 1)` (`rand`'s `Open01`)
//! - normal: ziggurat sampler from `rand_distr::StandardNormal`
//! - Gumbel: `-ln(-ln u)` with `u` open uniform
//!
//! Every step is integer arithmetic or IEEE-754 f64, so streams are
//! identical across platforms.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    seed: u64,
}

/// Enough state to resume a stream exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, as a decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// Independent stream `stream` under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut r = Self::new(seed);
        r.inner.set_stream(stream);
        r
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cursor(&self) -> RngCursor {
        RngCursor {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_cursor(cursor: &RngCursor) -> Option<Self> {
        let pos: u128 = cursor.word_pos.parse().ok()?;
        let mut r = Self::with_stream(cursor.seed, cursor.stream);
        r.inner.set_word_pos(pos);
        Some(r)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn open_uniform(&mut self) -> f64 {
        self.inner.sample(Open01)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.open_uniform())
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    /// Uniform in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// Index drawn from (possibly unnormalised) non-negative weights.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let u = self.uniform() * total;
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Gumbel(0, 1) draw from an open-interval uniform.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}
