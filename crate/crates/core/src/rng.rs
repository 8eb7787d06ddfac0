//! Named, splittable, counter-based random streams.
//!
//! Every stochastic operation in the crate takes an explicit stream. A stream
//! is identified by a 64-bit key; output i is `mix(key + i*phi)` (SplitMix64),
//! so draws are a pure function of (key, counter). Child streams are derived
//! by hashing a label into the key, which makes them independent of how many
//! draws the parent has made and independent of sibling order.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// A deterministic random stream. Cloning yields an identical stream
/// (same key, same position).
#[derive(Clone, Debug)]
pub struct RngStream {
    key: u64,
    ctr: u64,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        RngStream {
            key: mix(seed ^ GOLDEN),
            ctr: 0,
        }
    }

    /// Derive a child stream from a label. Independent of draw position.
    pub fn child(&self, label: &str) -> RngStream {
        RngStream {
            key: mix(self.key ^ fnv1a(label.as_bytes())),
            ctr: 0,
        }
    }

    /// Derive a child stream from an index (for per-sample / per-step streams).
    pub fn child_u64(&self, idx: u64) -> RngStream {
        RngStream {
            key: mix(self.key ^ mix(idx.wrapping_add(GOLDEN))),
            ctr: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let z = self.key.wrapping_add(self.ctr.wrapping_mul(GOLDEN));
        self.ctr += 1;
        mix(z)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; two uniforms per sample.
    pub fn normal(&mut self, mean: f64, sigma: f64) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + sigma * z
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::from_seed(7);
        let mut b = RngStream::from_seed(7);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn children_independent_of_parent_draws() {
        let mut a = RngStream::from_seed(3);
        let b = RngStream::from_seed(3);
        let _ = a.next_u64();
        let _ = a.next_u64();
        let mut ca = a.child("x");
        let mut cb = b.child("x");
        assert_eq!(ca.next_u64(), cb.next_u64());
    }

    #[test]
    fn distinct_labels_distinct_streams() {
        let r = RngStream::from_seed(0);
        let mut a = r.child("a");
        let mut b = r.child("b");
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_in_range() {
        let mut r = RngStream::from_seed(11);
        for _ in 0..1000 {
            let x = r.uniform(-0.2, 0.2);
            assert!((-0.2..0.2).contains(&x));
        }
    }

    #[test]
    fn bernoulli_frequency() {
        let mut r = RngStream::from_seed(5);
        let hits = (0..10_000).filter(|_| r.bernoulli(0.3)).count();
        let frac = hits as f64 / 10_000.0;
        assert!((frac - 0.3).abs() < 0.02, "frac = {frac}");
    }
}
