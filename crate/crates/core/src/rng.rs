use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic stream for `(seed, tags...)`, e.g. one per
/// training iteration and batch slot, so reruns and resumes see identical draws.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// A single `u64` from the `(seed, tags...)` stream; used to give every
/// generated video its own scene seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    stream_rng(seed, tags).next_u64()
}
