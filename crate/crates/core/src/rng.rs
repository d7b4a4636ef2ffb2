//! Seeded random streams.
//!
//! Every consumer draws from ChaCha8 keyed by `(seed, stream)`. ChaCha is a
//! counter-mode generator, so a stream's full state is the triple
//! `(seed, stream, word position)`; that triple is what checkpoints store.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Stream ids for the independent consumers of one experiment seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const TEACHER_TRAIN: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const DISTILL: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const SAMPLE: u64 = 6;
}

#[derive(Clone, Debug)]
pub struct StreamRng {
    seed: u64,
    inner: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    /// Independent sub-stream, e.g. one per grid run or per chain.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15), stream)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| invalid(format!("bad rng word position `{}`", state.word_pos)))?;
        let mut rng = Self::new(state.seed, state.stream);
        rng.inner.set_word_pos(pos);
        Ok(rng)
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
