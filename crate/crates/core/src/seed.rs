//! Named random streams derived from a single experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    DataOrder = 2,
    Augment = 3,
    CriterionBatch = 4,
    RandomCriterion = 5,
    Reinit = 6,
    Synthetic = 7,
    Corruption = 8,
}

/// Generator for `(seed, stream, index)`; distinct triples give independent
/// streams and the same triple always replays the same sequence.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
