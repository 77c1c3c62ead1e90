//! Deterministic seed derivation shared by every stochastic component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of integers into an independent seed.
///
/// `derive(s, &[a, b])` equals `derive(derive(s, &[a]), &[b])`.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(master, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(master: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(master, path))
}

/// Stream tags keep derived seeds of unrelated consumers apart.
pub mod tag {
    pub const TRACE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const SELECT: u64 = 5;
    pub const COMMITTEE: u64 = 6;
    pub const DROPOUT: u64 = 7;
    pub const FOLD: u64 = 8;
    pub const BENCH: u64 = 9;
    pub const SCHEDULE: u64 = 10;
}
