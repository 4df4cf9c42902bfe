//! Explicit seeded generators. No component reads global random state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a tag and a sequence of integers into an
/// independent child seed.
pub fn derive(base: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix(base);
    for b in tag.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    for &p in parts {
        h = splitmix(h ^ p);
    }
    h
}
