//! Deterministic, splittable randomness.
//!
//! Every stochastic choice in the crate flows from an explicit `u64` seed
//! through [`DetRng`]. Splitting is stateless: a child stream is a pure
//! function of the parent seed and a tag, so regenerating any shard never
//! depends on how much randomness was consumed elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Real;

/// SplitMix64 finalizer; decorrelates nearby seeds/tags.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based deterministic generator (ChaCha8 core) remembering its
/// own seed so it can derive independent child streams.
#[derive(Clone, Debug)]
pub struct DetRng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&splitmix64(seed).to_le_bytes());
        DetRng {
            seed,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for `tag`; independent of this generator's position.
    pub fn derive(&self, tag: u64) -> DetRng {
        DetRng::new(splitmix64(self.seed ^ splitmix64(tag)))
    }

    /// Child stream for a string label (e.g. "layout", "render").
    pub fn derive_str(&self, label: &str) -> DetRng {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
        for b in label.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.derive(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen::<u64>()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> Real {
        self.rng.gen::<f64>() as Real
    }

    pub fn uniform_in(&mut self, lo: Real, hi: Real) -> Real {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Standard normal via Box-Muller (no cached spare; two uniforms per draw).
    pub fn normal(&mut self) -> Real {
        let u1: f64 = (self.rng.gen::<f64>()).max(1e-300);
        let u2: f64 = self.rng.gen::<f64>();
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as Real
    }

    /// Deterministic Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// A random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = DetRng::new(7);
        let mut b = DetRng::new(7);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derive_is_stateless() {
        let mut a = DetRng::new(7);
        a.next_u64(); // consume
        let b = DetRng::new(7);
        assert_eq!(a.derive(3).next_u64(), b.derive(3).next_u64());
        assert_ne!(a.derive(3).next_u64(), a.derive(4).next_u64());
    }

    #[test]
    fn normal_moments_sane() {
        let mut r = DetRng::new(11);
        let n = 20_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = r.normal() as f64;
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
