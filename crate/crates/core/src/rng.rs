//! Seed derivation. Every random stream in a run is keyed off the run seed plus a
//! stream tag, so results do not depend on the order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags.
pub mod stream {
    pub const DATA_CENTERS: u64 = 1;
    pub const DATA_SAMPLES: u64 = 2;
    pub const DATA_PAIRS: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const BACKBONE_INIT: u64 = 5;
    pub const HEAD_INIT: u64 = 6;
    pub const CLIENT_SAMPLING: u64 = 7;
    pub const CLIENT_BATCHES: u64 = 8;
    pub const CENTRAL_BATCHES: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    for part in [stream, a, b] {
        h = splitmix64(h ^ part);
    }
    h
}

pub fn rng_for(seed: u64, stream: u64, a: u64, b: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        assert_ne!(derive_seed(1, 1, 0, 0), derive_seed(1, 2, 0, 0));
        assert_ne!(derive_seed(1, 1, 0, 1), derive_seed(1, 1, 1, 0));
        assert_eq!(derive_seed(9, 3, 4, 5), derive_seed(9, 3, 4, 5));
    }
}
