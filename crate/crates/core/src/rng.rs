//! Seeded random streams.
//!
//! Every random draw in the crate goes through ChaCha8 seeded from an
//! explicit 64-bit seed plus a stream id, so results are portable across
//! platforms and independent of any global state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids keep the draws of different pipeline stages independent.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE_TEACHER: u64 = 4;
    pub const SHUFFLE_STAGE1: u64 = 5;
    pub const SHUFFLE_STAGE2: u64 = 6;
    pub const STUDENT_INIT: u64 = 7;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
