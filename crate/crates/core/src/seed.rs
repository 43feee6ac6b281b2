use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent stream seed from a base seed and a path of tags
/// (splitmix64 finaliser applied per tag).
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut s = base ^ 0x243F_6A88_85A3_08D3;
    for &t in tags {
        s = mix(s.wrapping_add(mix(t.wrapping_add(0x9E37_79B9_7F4A_7C15))));
    }
    s
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

/// Stream tags, so that call sites cannot collide by accident.
pub mod stream {
    pub const TILE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const MCBN: u64 = 5;
    pub const RANDOM_ACQUIRE: u64 = 6;
    pub const FULL_SUPERVISION: u64 = 7;
}
