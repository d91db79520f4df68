//! Deterministic seed derivation.
//!
//! Every random draw in the pipeline flows from a single root seed through
//! named child seeds, so independent workers (rollouts, tasks, epochs) get
//! decorrelated but reproducible streams.

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

pub use rand_core::RngCore;

/// Reproducible RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// Builds a child seed from a base seed and a sequence of labels.
///
/// FNV-1a over the base seed bytes and each label, finished with a splitmix64
/// scramble so nearby inputs map to distant seeds.
#[derive(Debug, Clone)]
pub struct SeedPath {
    hash: u64,
}

impl SeedPath {
    pub fn new(base_seed: u64) -> Self {
        let mut p = SeedPath { hash: FNV_OFFSET };
        p.absorb(&base_seed.to_le_bytes());
        p
    }

    fn absorb(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.hash ^= u64::from(b);
            self.hash = self.hash.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn text(mut self, label: &str) -> Self {
        self.absorb(label.as_bytes());
        self.absorb(&[0xff]); // separator, so ("ab","c") != ("a","bc")
        self
    }

    pub fn index(mut self, value: u64) -> Self {
        self.absorb(&value.to_le_bytes());
        self
    }

    pub fn seed(&self) -> u64 {
        splitmix64(self.hash)
    }

    pub fn rng(&self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.seed())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Uniform draw from `[0, n)` without modulo bias.
pub fn uniform_index(rng: &mut Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// Uniform draw from `[0, 1)`.
pub fn uniform_f64(rng: &mut Rng) -> f64 {
    // 53 random bits scaled into [0,1)
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
