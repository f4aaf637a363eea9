//! Deterministic seed derivation: one root seed fans out into
//! independent streams per scenario, per mode, per epoch. Streams are
//! decorrelated by a splitmix-style finalizer so nearby indices do not
//! produce nearby states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives the sub-seed for `stream` under `seed`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A counter-based generator for the given seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearby_streams_diverge() {
        let a = mix_seed(0, 0);
        let b = mix_seed(0, 1);
        let c = mix_seed(1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
        // Hamming distance should be substantial, not a low-bit tweak.
        assert!((a ^ b).count_ones() > 16);
    }

    #[test]
    fn streams_are_stable() {
        assert_eq!(mix_seed(7, 42), mix_seed(7, 42));
    }
}
