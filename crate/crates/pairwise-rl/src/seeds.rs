//! Deterministic seed derivation.
//!
//! A single master seed fans out into independent streams, one per pipeline
//! stage and one per unit of work inside a stage (rollout, batch shuffle,
//! ...). Derivation is a splitmix64 mix of the parent seed with an FNV-1a
//! hash of a textual tag, so streams stay stable when unrelated stages are
//! added or reordered.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from `seed` for the stream named by `tag`.
pub fn derive(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ fnv1a(tag))
}

/// Derive a child seed for the `index`-th work item of the stream `tag`.
pub fn derive_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive(seed, tag) ^ splitmix64(index))
}

/// Seeded RNG for the stream named by `tag`.
pub fn rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

/// Seeded RNG for the `index`-th work item of the stream `tag`.
pub fn rng_indexed(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_indexed(seed, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_deterministic() {
        assert_eq!(derive(0, "rm"), derive(0, "rm"));
        assert_eq!(derive_indexed(7, "rollout", 3), derive_indexed(7, "rollout", 3));
    }

    #[test]
    fn distinct_tags_give_distinct_streams() {
        assert_ne!(derive(0, "rm"), derive(0, "rl"));
        assert_ne!(derive(0, "rm"), derive(1, "rm"));
        assert_ne!(derive_indexed(0, "rollout", 0), derive_indexed(0, "rollout", 1));
    }
}
