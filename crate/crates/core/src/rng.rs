//! Deterministic counter-seeded random streams.
//!
//! Every stochastic component (env resets, damage sampling, action noise,
//! weight init) draws from its own [`RngStream`], derived from a global seed
//! and a stream id. Streams are independent of construction order, which
//! keeps parallel env setup reproducible, and the generator is frozen in
//! this crate so checkpoints stay bitwise stable across toolchain updates.

/// splitmix64 state mix.
#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A small deterministic PRNG stream (splitmix64 chain).
#[derive(Clone, Debug)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    /// Derive a stream from a global seed and a stream id.
    ///
    /// Distinct `(seed, stream)` pairs yield decorrelated sequences.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut s = seed ^ 0x5851_f42d_4c95_7f2d;
        let a = splitmix64(&mut s);
        let mut t = stream ^ 0x1405_7b7e_f767_814f;
        let b = splitmix64(&mut t);
        RngStream { state: a ^ b.rotate_left(17) }
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift rejection-free mapping; bias is negligible for the
        // small n used here and keeps the draw a single next_u64 call.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal via Box-Muller (one value per pair of uniforms).
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        if u1 <= 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Sample `k` distinct indices from `[0, n)`, returned sorted.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let i = self.below(pool.len());
            out.push(pool.swap_remove(i));
        }
        out.sort_unstable();
        out
    }

    /// Weighted choice among `weights`; weights must be non-negative and not all zero.
    pub fn weighted_choice(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut x = self.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                return i;
            }
            x -= w;
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = RngStream::new(7, 0);
        let mut b = RngStream::new(7, 1);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_bounds() {
        let mut r = RngStream::new(1, 0);
        for _ in 0..10_000 {
            let x = r.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = RngStream::new(2, 0);
        let n = 200_000;
        let samples: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn choose_distinct_is_distinct_and_in_range() {
        let mut r = RngStream::new(3, 0);
        for _ in 0..100 {
            let picks = r.choose_distinct(6, 4);
            assert_eq!(picks.len(), 4);
            let mut uniq = picks.clone();
            uniq.dedup();
            assert_eq!(uniq.len(), 4);
            assert!(picks.iter().all(|&j| j < 6));
        }
    }

    #[test]
    fn weighted_choice_respects_zero_weights() {
        let mut r = RngStream::new(4, 0);
        for _ in 0..1000 {
            let c = r.weighted_choice(&[1.0, 0.0, 2.0, 0.0]);
            assert!(c == 0 || c == 2);
        }
    }
}
