//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a seed derived here, so results are independent of call
//! interleaving and platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with a path of tags into a new seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable numeric tag for a label string.
pub fn tag(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive(7, &[1]), derive(7, &[2]));
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
    }

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<u32> = (0..4).map({ let mut r = rng(3); move |_| r.gen() }).collect();
        let b: Vec<u32> = (0..4).map({ let mut r = rng(3); move |_| r.gen() }).collect();
        assert_eq!(a, b);
    }
}
