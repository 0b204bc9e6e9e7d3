//! Seed derivation. All randomness in a run flows from one `u64` seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent, named streams of one seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const MIXING: u64 = 4;
    pub const CLUSTER: u64 = 5;
    pub const HOLDOUT: u64 = 6;
}

/// A ChaCha8 generator on stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of a sweep member, `hash(seed, run_id)`.
pub fn run_seed(seed: u64, run_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(run_id.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}
