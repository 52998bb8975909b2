//! Deterministic counter-based random streams.
//!
//! `RngStream` is a SplitMix64 sequence keyed by a `(seed, stream)` pair.
//! The generator state is pure 64-bit integer arithmetic, so identical
//! keys produce an identical value sequence on every platform, and child
//! streams derived from a parent depend only on the parent's key — never
//! on how many values the parent has already produced. That makes
//! per-sample results independent of processing order.
//!
//! Floating-point values are built from the integer stream with plain
//! arithmetic (no libm calls), so they are reproducible bit for bit:
//! uniforms take the top 53 bits, and the normal approximation sums
//! twelve uniforms (Irwin–Hall) instead of going through `ln`/`cos`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes, for deriving streams from string identifiers.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A deterministic random stream identified by `(seed, stream)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    state: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let state = mix(seed ^ mix(stream.wrapping_mul(GOLDEN)));
        RngStream {
            seed,
            stream,
            state,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream `k`. A pure function of the parent's key and `k`;
    /// unaffected by values already drawn from the parent.
    pub fn derive(&self, k: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream ^ k.wrapping_mul(GOLDEN)))
    }

    /// Child stream keyed by a string (record ids, parameter names).
    pub fn derive_str(&self, tag: &str) -> RngStream {
        self.derive(fnv1a(tag.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` via Lemire's multiply-shift reduction.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Standard-normal approximation: sum of 12 uniforms minus 6
    /// (Irwin–Hall). Exact-arithmetic only, so platform-reproducible.
    pub fn normal_approx(&mut self) -> f64 {
        let mut s = 0.0;
        for _ in 0..12 {
            s += self.next_f64();
        }
        s - 6.0
    }

    /// Normal(0, `std`) truncated to `±clip·std` by redrawing.
    pub fn trunc_normal(&mut self, std: f64, clip: f64) -> f64 {
        loop {
            let z = self.normal_approx();
            if z.abs() <= clip {
                return z * std;
            }
        }
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_sequence() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_streams_diverge() {
        let mut a = RngStream::new(42, 0);
        let mut b = RngStream::new(42, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn derive_ignores_parent_position() {
        let parent = RngStream::new(9, 3);
        let child_before = parent.derive(5);
        let mut consumed = parent;
        for _ in 0..17 {
            consumed.next_u64();
        }
        let child_after = consumed.derive(5);
        assert_eq!(child_before, child_after);
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = RngStream::new(1, 0);
        for _ in 0..1000 {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn trunc_normal_respects_clip() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..1000 {
            assert!(rng.trunc_normal(0.02, 2.0).abs() <= 0.04 + 1e-12);
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = RngStream::new(11, 0);
        let mut xs: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
