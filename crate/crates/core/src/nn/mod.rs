//! Parameterized layers and the simple regularizers used as baselines.

mod attention;
mod layers;
mod params;
mod regularizers;

pub use attention::{AttentionOutput, EncoderBlock, FeedForward, MultiHeadAttention};
pub use layers::{Embedding, LayerNorm, Linear};
pub use params::{Bound, Group, Param, ParamGroup, ParamId, ParamStore};
pub use regularizers::{
    dropout, gaussian_noise, mixout, weight_decay_to_init, Baseline, BaselineKind, GAUSSIAN_NOISE_SCALE,
};
