//! Seed derivation. Every random stream in a run is keyed off the base seed
//! plus a tag path, so resuming mid-run reproduces the same streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_separate_streams() {
        assert_eq!(derive(1, &[2, 3]), derive(1, &[2, 3]));
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_ne!(derive(1, &[2]), derive(2, &[2]));
    }
}
