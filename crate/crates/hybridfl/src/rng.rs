//! Deterministic seed derivation.
//!
//! Every random stream in a run is derived from a single master seed by
//! mixing a stream tag and context indices (round, client id, ...) through
//! SplitMix64. Streams are therefore independent of execution order: the
//! client-5-round-3 stream is the same whether clients run sequentially or
//! in parallel, and replaying a run only requires the master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_DATASET: u64 = 1;
pub const STREAM_PARTITION: u64 = 2;
pub const STREAM_SERVER_DRAW: u64 = 3;
pub const STREAM_CLIENT_SAMPLING: u64 = 4;
pub const STREAM_CLIENT_TRAIN: u64 = 5;
pub const STREAM_SERVER_TRAIN: u64 = 6;
pub const STREAM_SERVER_GRAD: u64 = 7;
pub const STREAM_INIT: u64 = 8;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream identified by `parts`,
/// e.g. `[STREAM_CLIENT_TRAIN, round, client_id]`.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(master);
    for &part in parts {
        state = splitmix64(state ^ splitmix64(part));
    }
    state
}

/// Deterministic generator for the given stream.
pub fn stream(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}
