//! Counter-based deterministic random number generation.
//!
//! Every stochastic draw in this crate is a pure function of
//! `(seed, counter)`, with independent seeds derived from a base seed and a
//! stream label. This makes results bit-reproducible across runs and
//! independent of thread scheduling: parallel workers never share generator
//! state, they just index disjoint counter ranges or derived streams.

use std::f64::consts::TAU;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a bijective 64-bit mixer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Raw 64-bit output at a `(seed, counter)` coordinate.
#[inline]
pub fn u64_at(seed: u64, counter: u64) -> u64 {
    mix64(seed ^ counter.wrapping_mul(GOLDEN).wrapping_add(GOLDEN))
}

/// Uniform draw in `[0, 1)` at a `(seed, counter)` coordinate (53-bit mantissa).
#[inline]
pub fn uniform_at(seed: u64, counter: u64) -> f64 {
    (u64_at(seed, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Two independent standard-normal draws via Box-Muller at a pair index.
///
/// Pair `i` consumes the uniforms at counters `2i` and `2i + 1`.
#[inline]
pub fn gaussian_pair_at(seed: u64, pair: u64) -> (f64, f64) {
    // Guard the log away from zero by flipping u1 into (0, 1].
    let u1 = 1.0 - uniform_at(seed, 2 * pair);
    let u2 = uniform_at(seed, 2 * pair + 1);
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Derive an independent stream seed from a base seed and a label.
///
/// Used to give each pipeline stage (collect/train/eval), and each unit of
/// work within a stage, its own non-overlapping counter space.
pub fn derive(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the seed.
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.as_bytes() {
        h = (h ^ u64::from(*b)).wrapping_mul(0x100_0000_01B3);
    }
    mix64(seed ^ mix64(h))
}

/// Derive a stream seed from a base seed and an index.
pub fn derive_idx(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(GOLDEN)))
}

/// Sequential convenience wrapper over the counter-based primitives.
///
/// A `CounterRng` is nothing but a `(seed, next-counter)` pair; cloning or
/// recreating it with the same seed replays the identical sequence.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Generator for a labeled sub-stream of `seed`.
    pub fn stream(seed: u64, label: &str) -> Self {
        Self::new(derive(seed, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = u64_at(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        let v = uniform_at(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw (consumes one Box-Muller pair per call).
    pub fn gaussian(&mut self) -> f64 {
        debug_assert!(self.counter.is_multiple_of(2));
        let pair = self.counter / 2;
        self.counter += 2;
        gaussian_pair_at(self.seed, pair).0
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Draw `k` distinct indices from `0..n` (order of first selection).
    ///
    /// Panics if `k > n`; callers validate and report shortfalls themselves.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct indices from 0..{n}");
        // Partial Fisher-Yates over an index array.
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
