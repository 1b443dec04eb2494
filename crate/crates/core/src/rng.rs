//! Deterministic per-repetition random streams.
//!
//! Every Monte-Carlo routine draws repetition `r` from ChaCha8 stream `r` of
//! one user seed. Streams are independent by construction, and because each
//! repetition owns its stream, results do not depend on how repetitions are
//! scheduled across threads — seeded outputs are byte-identical at any thread
//! count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG for repetition `stream` of the experiment identified by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
