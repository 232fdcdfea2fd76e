//! Seed splitting.
//!
//! Every run is driven by one 64-bit seed. Each consumer draws from its own
//! ChaCha8 stream: the key is derived from the run seed and the stream id is
//! the consumer's [`Stream`] discriminant, so streams never overlap and adding
//! draws in one module leaves every other module's sequence untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ActorInit = 1,
    CriticInit = 2,
    BiasInit = 3,
    EnvReset = 4,
    Exploration = 5,
    Replay = 6,
    TargetSmoothing = 7,
    Dropout = 8,
    Evaluation = 9,
    Warmup = 10,
}

/// Returns the generator for `stream` under run seed `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A sub-stream keyed by an additional counter (used for per-step dropout masks).
pub fn counter_rng(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    let mut rng = stream_rng(seed, stream);
    // 2^6 words per block; jump whole blocks so counters never share output.
    rng.set_word_pos((counter as u128) << 20);
    rng
}
