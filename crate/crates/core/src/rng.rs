//! Deterministic seed derivation. Every random stream in the crate is a
//! ChaCha8 generator keyed by a base seed plus a short path of stream tags,
//! so runs, shards and time steps never share randomness by accident.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream tags, kept distinct so that independent uses never collide.
pub mod tag {
    pub const TEACHER: u64 = 1;
    pub const INIT: u64 = 2;
    pub const DATA: u64 = 3;
    pub const SCHEDULE: u64 = 4;
    pub const ONLINE: u64 = 5;
    pub const REPLICA: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const HARDNESS: u64 = 8;
    pub const THETA: u64 = 9;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix a base seed with a path of tags into a single 64-bit seed.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t.wrapping_add(0x5851_F42D))))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, path))
}

#[inline]
pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_normal(rng: &mut Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
