//! Seed derivation.
//!
//! Every stochastic component of a run owns its own `ChaCha8Rng`. The seed
//! for component stream `s` of run seed `r` is
//! `splitmix64(r ^ splitmix64(s))`, so streams are independent of the order
//! in which components draw and of the number of draws made by others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of the splitmix64 generator, used as a 64-bit mixer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn split_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

/// Named component streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    AgentInit = 1,
    AgentSampling = 2,
    EncoderInit = 3,
    EncoderTraining = 4,
    Replay = 5,
    GoalSampling = 6,
    Exploration = 7,
    Bootstrap = 8,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(seed, stream as u64))
}
