use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for a purpose identified by `tags`.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

// purpose tags
pub(crate) const INIT: u64 = 1;
pub(crate) const HEAD: u64 = 2;
pub(crate) const SHUFFLE: u64 = 3;
pub(crate) const FLIP: u64 = 4;
pub(crate) const TRAIN_SET: u64 = 5;
pub(crate) const TEST_SET: u64 = 6;
pub(crate) const RETRY: u64 = 7;
