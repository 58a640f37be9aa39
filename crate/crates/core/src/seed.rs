//! Master-seed fan-out. Every consumer gets its own ChaCha stream selected by
//! `(purpose, counter)`, so draws in one place never shift another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Rollout = 4,
    Eval = 5,
}

pub fn stream_rng(master: u64, purpose: Stream, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((purpose as u64) << 48) ^ counter);
    rng
}
