//! Seed fan-out.
//!
//! Every random draw in the crate comes from a ChaCha8 stream seeded with a
//! `u64`. Child seeds are derived from a master seed by a counter scheme:
//! `derive(master, stream, index) = mix(mix(master ^ stream * PHI) + index)`,
//! where `mix` is the SplitMix64 finalizer and `stream` names the purpose of
//! the draw (see the constants below). Changing the master seed changes every
//! child; fixing it reproduces every child.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const PHI: u64 = 0x9E37_79B9_7F4A_7C15;

pub mod stream {
    pub const CHANNEL: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const TEST_DATA: u64 = 3;
    pub const TRAINING: u64 = 4;
    pub const ERROR_RATES: u64 = 5;
    pub const HELDOUT: u64 = 6;
    pub const SHARD: u64 = 7;
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    mix(mix(master ^ stream.wrapping_mul(PHI)).wrapping_add(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn children_differ_and_repeat() {
        let a = derive(7, stream::CHANNEL, 0);
        assert_eq!(a, derive(7, stream::CHANNEL, 0));
        assert_ne!(a, derive(7, stream::CHANNEL, 1));
        assert_ne!(a, derive(7, stream::TRAIN_DATA, 0));
        assert_ne!(a, derive(8, stream::CHANNEL, 0));
    }
}
