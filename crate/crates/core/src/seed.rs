//! Splittable seeds: independent ChaCha streams of one master seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed of sub-stream `stream` of `master`. Distinct streams give
/// independent generators and the result depends on nothing else, so
/// parallel work seeded this way is reproducible in any order.
pub fn split(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Generator for sub-stream `stream` of `master`.
pub fn rng(master: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split(master, stream))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ_and_repeat() {
        assert_eq!(split(1, 0), split(1, 0));
        assert_ne!(split(1, 0), split(1, 1));
        assert_ne!(split(1, 0), split(2, 0));
    }
}
