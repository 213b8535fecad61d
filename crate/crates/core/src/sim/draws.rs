//! Counter-based random draws: the value for `(stream, index)` does not depend
//! on which other draws were made before, so concurrent and serialized runs
//! see the same numbers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Draws {
    base: ChaCha8Rng,
}

impl Draws {
    pub fn new(seed: u64) -> Self {
        Draws { base: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn word(&self, stream: u64, index: u64) -> u64 {
        let mut rng = self.base.clone();
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(index) * 2);
        rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn unit(&self, stream: u64, index: u64) -> f64 {
        (self.word(stream, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `0..n` (Lemire's multiply-shift, bias below 2^-64 · n).
    pub fn below(&self, stream: u64, index: u64, n: u64) -> u64 {
        ((u128::from(self.word(stream, index)) * u128::from(n)) >> 64) as u64
    }
}

/// FNV-1a, used to turn names into stream ids.
pub fn stream_id(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        for b in part.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
