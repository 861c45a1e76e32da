//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng`
//! seeded from a base seed and a short path of integer tags, so outputs are
//! pure functions of (config, seed, index).

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as StreamRng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`, order-sensitively.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    s
}

pub fn stream(base: u64, tags: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags used across the crate.
pub mod tag {
    pub const SCENE: u64 = 1;
    pub const REGIONS: u64 = 2;
    pub const QA: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const FINETUNE: u64 = 6;
    pub const HEADS: u64 = 7;
    pub const FEW_SHOT: u64 = 8;
    pub const HEALTH: u64 = 9;
    pub const RANDOM_PREDICTOR: u64 = 10;
}
