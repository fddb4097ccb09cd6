//! Seeded random streams.
//!
//! Every random decision (augmentation, masking, data order) draws from a
//! stream derived from the run seed plus a few integer tags such as the epoch
//! and the global sample index. A sample therefore sees the same randomness
//! no matter how batches are split into micro-batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags, kept distinct so streams never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const ORDER: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const MASK: u64 = 4;
    pub const BANK: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const EVAL: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream for `(seed, tags..)`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
