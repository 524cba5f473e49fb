//! Reproducible random streams.
//!
//! Every random draw goes through [`StageRng`] (ChaCha8), seeded either
//! directly or from a root seed plus a fixed stage label, so a single seed
//! reproduces a whole run on any platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the stage `label` under `root`. FNV-1a over the label, mixed with splitmix64.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}

pub fn rng_from_seed(seed: u64) -> StageRng {
    StageRng::seed_from_u64(seed)
}

pub fn stage_rng(root: u64, label: &str) -> StageRng {
    rng_from_seed(derive_seed(root, label))
}
