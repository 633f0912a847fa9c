//! Deterministic seed derivation.
//!
//! Every random stream in the simulator is keyed by a tuple such as
//! `(run_seed, client_id, round, epoch)` so results never depend on the order
//! in which parallel workers are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams with otherwise equal keys apart.
pub mod stream {
    pub const INIT: u64 = 0x1;
    pub const BATCH: u64 = 0x2;
    pub const PARTICIPATION: u64 = 0x3;
    pub const DATA: u64 = 0x4;
    pub const SPLIT: u64 = 0x5;
    pub const CLUSTER: u64 = 0x6;
    pub const TRIAL: u64 = 0x7;
    pub const SIGMA: u64 = 0x8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of keys into a new 64-bit seed.
pub fn derive(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng(base: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, keys))
}
