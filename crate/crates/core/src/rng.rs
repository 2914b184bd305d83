//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit seed. Independent streams are
//! derived from a root seed plus a path of tags, so the draws of one
//! trajectory never depend on how many other trajectories were generated
//! alongside it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Keeping them in one place avoids accidental reuse.
pub mod tag {
    pub const INIT_NOISE: u64 = 0x01;
    pub const SDE_NOISE: u64 = 0x02;
    pub const TRAJ_META: u64 = 0x03;
    pub const PAIR_DATA: u64 = 0x04;
    pub const BATCH: u64 = 0x05;
    pub const DROPOUT: u64 = 0x06;
    pub const INIT_PARAMS: u64 = 0x07;
    pub const FOURIER: u64 = 0x08;
    pub const DATA: u64 = 0x09;
    pub const EVAL: u64 = 0x0a;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a path of tags.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// A generator for the stream identified by `seed` and `path`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}
