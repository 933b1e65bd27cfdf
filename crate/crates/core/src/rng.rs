//! Seeded random streams.
//!
//! Every stream is a xoshiro256++ generator whose 256-bit state is filled
//! by SplitMix64 from a single 64-bit seed (`rand_xoshiro`'s
//! `seed_from_u64`). Independent streams of one experiment share the user
//! seed and differ by a stream id mixed in with a golden-ratio multiply.
//! The algorithm is fixed, so a seed reproduces the same draws on every
//! platform.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Well-known stream ids used by the training driver.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const HESSIAN: u64 = 7;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map({
            let mut r = seeded(7, 1);
            move |_| r.next_u64()
        }).collect();
        let b: Vec<u64> = (0..4).map({
            let mut r = seeded(7, 1);
            move |_| r.next_u64()
        }).collect();
        let c = seeded(7, 2).next_u64();
        assert_eq!(a, b);
        assert_ne!(a[0], c);
    }
}
