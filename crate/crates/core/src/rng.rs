//! Counter-based randomness.
//!
//! Every random decision in a run is a pure function of
//! `(seed, purpose, step, layer, token)`. The draw is the first 64-bit word of
//! a ChaCha8 keystream whose key is derived from `(seed, purpose)`, whose
//! stream id is the training step, and whose word position encodes
//! `(layer, token)`. Draws can therefore be evaluated in any order, or in
//! parallel, with identical results, and changing how many draws one purpose
//! consumes never shifts another purpose's stream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Token index used for draws shared by a whole layer.
pub const LAYER_SENTINEL: u64 = (1 << 40) - 1;

/// What a random draw is used for. Each purpose owns an independent stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Purpose {
    LayerGate = 1,
    HaeChoice = 2,
    SubGate = 3,
    SubChoice = 4,
    ReconSubGate = 5,
    ReconSubChoice = 6,
    VaeNoise = 7,
    Dropout = 8,
    GaussianNoise = 9,
    Mixout = 10,
    Init = 11,
    Shuffle = 12,
    Data = 13,
    DataNoise = 14,
    EvalMvcr = 15,
}

/// Coordinates of one draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DrawKey {
    pub purpose: Purpose,
    pub step: u64,
    pub layer: u32,
    pub token: u64,
}

impl DrawKey {
    pub fn new(purpose: Purpose, step: u64, layer: u32, token: u64) -> Self {
        Self { purpose, step, layer, token }
    }

    pub fn layer_level(purpose: Purpose, step: u64, layer: u32) -> Self {
        Self::new(purpose, step, layer, LAYER_SENTINEL)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn key(&self, purpose: Purpose) -> [u8; 32] {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..12].copy_from_slice(&(purpose as u32).to_le_bytes());
        key[12..16].copy_from_slice(b"mvcr");
        key
    }

    /// Raw 64-bit draw.
    pub fn bits(&self, key: DrawKey) -> u64 {
        debug_assert!(key.token <= LAYER_SENTINEL);
        debug_assert!(key.layer < (1 << 16));
        let mut rng = ChaCha8Rng::from_seed(self.key(key.purpose));
        rng.set_stream(key.step);
        let index = ((key.layer as u128) << 40) | key.token as u128;
        rng.set_word_pos(index * 2);
        rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&self, key: DrawKey) -> f64 {
        (self.bits(key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`.
    pub fn index(&self, key: DrawKey, n: usize) -> usize {
        assert!(n > 0, "index draw over an empty range");
        ((self.uniform(key) * n as f64) as usize).min(n - 1)
    }

    /// A sequential generator for bulk sampling (initialization, data,
    /// dropout masks). Streams with distinct `(purpose, stream)` never overlap.
    pub fn stream(&self, purpose: Purpose, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key(purpose));
        rng.set_stream(stream);
        rng.set_word_pos(1u128 << 66);
        rng
    }

    /// Derived generator with an unrelated seed, for nested experiments.
    pub fn derive(&self, salt: u64) -> CounterRng {
        let mut rng = self.stream(Purpose::Init, salt ^ 0x9e37_79b9_7f4a_7c15);
        CounterRng::new(rng.next_u64())
    }
}
