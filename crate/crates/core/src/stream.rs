//! Seeded random streams for independent replicates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counter-based generator for replicate `index` under `seed`.
///
/// Every replicate gets its own ChaCha stream, so results do not depend on
/// how replicates are scheduled across threads.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Master seed for the sub-experiment `tag`, drawn from a stream no replicate uses.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    replicate_rng(seed, u64::MAX - tag).random()
}
