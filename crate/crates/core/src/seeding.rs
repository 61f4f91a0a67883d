//! Every random stream derives from one root seed, split by purpose and
//! an index (sample, step) via ChaCha stream ids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Batches = 3,
    Noise = 4,
    Contrast = 5,
    EvalNoise = 6,
}

pub fn rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((stream as u64) << 48) | (index & ((1 << 48) - 1)));
    r
}
