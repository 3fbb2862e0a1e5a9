//! Seed discipline. One u64 experiment seed fans out into independent
//! ChaCha streams, one per concern, so data generation, holdout draws,
//! weight init, and training never share or reorder each other's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_DATA: u64 = 0;
pub(crate) const STREAM_HOLDOUT: u64 = 1;
pub(crate) const STREAM_INIT: u64 = 2;
pub(crate) const STREAM_TRAIN: u64 = 3;

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
