//! Seeded random streams.
//!
//! Every consumer of randomness asks for its own stream by name (for example
//! `"layer1.head3.wq"`). A stream is a ChaCha20 generator keyed by the run's
//! 64-bit seed with the ChaCha stream id taken from a hash of the name, so the
//! numbers a component sees never depend on the order in which other
//! components drew theirs.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

/// First eight bytes of SHA-256 of `name`, little-endian.
pub fn name_id(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Child seed for `name` under `seed`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    StreamRng::new(seed, name).next_u64()
}

pub struct StreamRng {
    inner: ChaCha20Rng,
}

impl StreamRng {
    pub fn new(seed: u64, name: &str) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(name_id(name));
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-scale, scale)`.
    pub fn symmetric(&mut self, scale: f64) -> f64 {
        (2.0 * self.uniform() - 1.0) * scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_of_draw_order() {
        let mut a = StreamRng::new(42, "a");
        let first = a.next_u64();
        let mut b = StreamRng::new(42, "b");
        let _ = b.next_u64();
        let mut a2 = StreamRng::new(42, "a");
        assert_eq!(a2.next_u64(), first);
        assert_ne!(StreamRng::new(42, "b").next_u64(), first);
        assert_ne!(StreamRng::new(43, "a").next_u64(), first);
    }

    #[test]
    fn uniform_range() {
        let mut r = StreamRng::new(0, "u");
        for _ in 0..1000 {
            let x = r.uniform();
            assert!((0.0..1.0).contains(&x));
            let y = r.symmetric(2.5);
            assert!((-2.5..2.5).contains(&y));
        }
    }
}
