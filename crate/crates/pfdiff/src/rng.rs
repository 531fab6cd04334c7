//! Deterministic RNG plumbing.
//!
//! A single global seed fans out into named streams (`data`, `schedule`,
//! `ddpm`, `sampling`, ...) so every pipeline stage is independently
//! reproducible: re-running one stage never perturbs the draws of another.
//! Parallel workers further split a stream by index, which keeps results
//! independent of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Derive the RNG for a named stream from the global seed.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derive the RNG for one work item (sample index, chain index, ...) of a
/// named stream. Uses ChaCha's native stream counter, so substreams never
/// overlap regardless of how many values each one consumes.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = stream(seed, name);
    rng.set_stream(index);
    rng
}

/// Full serializable state of a ChaCha stream, for checkpoints: restoring it
/// and continuing produces the same draws as an uninterrupted run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            key: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}
