//! Counter-based random streams. A stream is keyed by `(seed, domain)` and
//! selected by an index, so replication `r` draws the same numbers no matter
//! which thread runs it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes, kept apart so that e.g. bootstrap draws never reuse the
/// numbers that generated the data.
pub mod domain {
    pub const DATA: u64 = 1;
    pub const BOOTSTRAP: u64 = 2;
    pub const TRUTH: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const FIXTURE: u64 = 5;
}

pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Sub-stream index for a pair of counters, e.g. (outer replication, inner replication).
pub fn pair_index(outer: u64, inner: u64) -> u64 {
    (outer << 32) | (inner & 0xffff_ffff)
}
