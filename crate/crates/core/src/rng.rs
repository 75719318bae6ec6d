//! Seeded RNG sub-streams.
//!
//! All randomness in a run flows from one user-facing seed. Each consumer
//! (initialization, extraction sampling, splits, ...) derives its own named
//! stream so adding a consumer never perturbs the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math::fnv1a64;

/// ChaCha stream keyed by `(seed, label)`; deterministic across platforms.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(label));
    rng
}
