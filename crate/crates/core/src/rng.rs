//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose 64-bit
//! seed is derived from a root seed and a short list of integer tags
//! (stream kind, node index, view index, ...). Derivation is a SplitMix64
//! finalizer folded over the tags:
//!
//! ```text
//! h0 = mix(root ^ 0x9E37_79B9_7F4A_7C15)
//! hi = mix(h(i-1) ^ mix(tag_i + i))
//! ```
//!
//! so the same `(root, tags)` pair yields the same stream on every platform,
//! independent of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Values are part of the on-disk reproducibility contract.
pub mod stream {
    pub const WORLD_NODES: u64 = 1;
    pub const WORLD_LANDMARKS: u64 = 2;
    pub const WORLD_LATENTS: u64 = 3;
    pub const INSTRUCTION: u64 = 4;
    pub const VIEW: u64 = 5;
    pub const ROLLOUT: u64 = 6;
    pub const EPISODE: u64 = 7;
    pub const INIT: u64 = 8;
    pub const BATCH: u64 = 9;
    pub const DROPOUT: u64 = 10;
    pub const WORLD_BRIDGE: u64 = 11;
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut h = mix(root ^ 0x9E37_79B9_7F4A_7C15);
    for (i, &t) in tags.iter().enumerate() {
        h = mix(h ^ mix(t.wrapping_add(i as u64)));
    }
    h
}

pub fn rng_for(root: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tags))
}
