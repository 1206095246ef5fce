//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by `(seed, purpose)` and selected by an index, so results do
//! not depend on thread scheduling or on how much randomness other stages used.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Split,
    Init,
    WarmStart,
    Epoch,
    Ais,
    Synthetic,
}

impl Purpose {
    fn salt(self) -> u64 {
        match self {
            Purpose::Split => 0x5eed_0001,
            Purpose::Init => 0x5eed_0002,
            Purpose::WarmStart => 0x5eed_0003,
            Purpose::Epoch => 0x5eed_0004,
            Purpose::Ais => 0x5eed_0005,
            Purpose::Synthetic => 0x5eed_0006,
        }
    }
}

pub fn stream_rng(seed: u64, purpose: Purpose, index: u64) -> ChainRng {
    let mut rng = ChainRng::seed_from_u64(seed ^ purpose.salt().rotate_left(32));
    rng.set_stream(index);
    rng
}

/// Key from which independent per-chain generators are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainKey([u8; 32]);

impl ChainKey {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut key = [0u8; 32];
        rng.fill(&mut key);
        Self(key)
    }

    pub fn chain(&self, index: u64) -> ChainRng {
        let mut rng = ChainRng::from_seed(self.0);
        rng.set_stream(index);
        rng
    }
}
