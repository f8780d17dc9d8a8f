//! Seed derivation.
//!
//! Every randomized operation takes a `u64` seed and derives independent
//! ChaCha streams from it, one per logical task (restart, row, set index).
//! Streams never share state, so per-task results do not depend on the
//! order in which tasks run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for the task `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a label into a seed so unrelated consumers of one global seed do
/// not draw correlated numbers.
pub fn derive(seed: u64, label: &str) -> u64 {
    use core::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write_u64(seed);
    h.write(label.as_bytes());
    h.finish()
}
