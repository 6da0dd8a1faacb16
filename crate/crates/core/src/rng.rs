//! Seeded random streams.
//!
//! Every consumer of randomness derives its own stream from the global seed,
//! a purpose tag and an index, so results never depend on call order or
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: u64 = 1;
pub const MASKING: u64 = 2;
pub const SHUFFLE: u64 = 3;
pub const BATCH: u64 = 4;
pub const DROPOUT: u64 = 5;
pub const INIT: u64 = 6;
pub const EVAL: u64 = 7;
pub const FINETUNE: u64 = 8;

/// Stream keyed by `(seed, index)` on stream id `purpose`. Distinct
/// triples never share a keystream.
pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    let mut r = ChaCha8Rng::from_seed(key);
    r.set_stream(purpose);
    r
}

/// Folds an epoch into a purpose tag so each epoch resamples.
pub fn epoch_purpose(purpose: u64, epoch: u64) -> u64 {
    purpose | (epoch << 8)
}
