//! Counter-based random streams.
//!
//! Every random draw in a run comes from a ChaCha8 stream keyed by the
//! master seed and a stream id built from `(purpose, iteration, index)`, so
//! results do not depend on thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Explore = 0,
    Anchors = 1,
    BaselineMask = 2,
    Rollout = 3,
    Misc = 4,
}

const INDEX_BITS: u32 = 36;
const ITER_BITS: u32 = 20;

/// Stream for `(purpose, t, index)` under `master`.
///
/// # Panics
/// If `t ≥ 2^20` or `index ≥ 2^36`.
pub fn stream(master: u64, purpose: Purpose, t: u64, index: u64) -> ChaCha8Rng {
    assert!(t < 1 << ITER_BITS, "iteration {t} out of stream range");
    assert!(index < 1 << INDEX_BITS, "index {index} out of stream range");
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((purpose as u64) << (INDEX_BITS + ITER_BITS)) | (t << INDEX_BITS) | index);
    rng
}
