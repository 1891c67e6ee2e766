use rand::Rng;

use super::layers::{LayerNorm, Linear};
use super::params::{Bound, Group, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{c, Scalar, Tape, Var};

/// Score offset for masked keys; `exp` of it underflows to exactly zero.
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub out: Var,
    /// Attention probabilities, `[batch * heads, seq, seq]`.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid("attention", format!("hidden dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, group, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, group, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, group, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, group, rng)?,
            heads,
            dim,
        })
    }

    fn split_heads<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let head_dim = self.dim / self.heads;
        let x = tape.reshape(x, &[batch, seq, self.heads, head_dim])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[batch * self.heads, seq, head_dim])
    }

    /// Self-attention over `x: [batch, seq, dim]`. `key_valid[b * seq + j]`
    /// false hides key `j` of example `b` from every query.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::shape("attention", &shape, &[self.dim]));
        }
        let (batch, seq) = (shape[0], shape[1]);
        let head_dim = self.dim / self.heads;

        let q = self.query.forward(tape, params, x)?;
        let k = self.key.forward(tape, params, x)?;
        let v = self.value.forward(tape, params, x)?;
        let q = self.split_heads(tape, q, batch, seq)?;
        let k = self.split_heads(tape, k, batch, seq)?;
        let v = self.split_heads(tape, v, batch, seq)?;

        let scores = tape.batch_matmul(q, k, true)?;
        let mut scores = tape.scale(scores, c::<T>(1.0 / (head_dim as f64).sqrt()));
        if let Some(valid) = key_valid {
            if valid.len() != batch * seq {
                return Err(Error::shape("attention", &shape, &[valid.len()]));
            }
            let mut offset = Vec::with_capacity(batch * self.heads * seq * seq);
            for b in 0..batch {
                let row: Vec<T> = valid[b * seq..(b + 1) * seq]
                    .iter()
                    .map(|&ok| if ok { T::zero() } else { c(MASKED_SCORE) })
                    .collect();
                for _ in 0..self.heads * seq {
                    offset.extend_from_slice(&row);
                }
            }
            scores = tape.add_const(scores, &offset)?;
        }
        let weights = tape.softmax(scores);
        let ctx = tape.batch_matmul(weights, v, false)?;
        let ctx = tape.reshape(ctx, &[batch, self.heads, seq, head_dim])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch, seq, self.dim])?;
        let out = self.output.forward(tape, params, ctx)?;
        Ok(AttentionOutput { out, weights })
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, group, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, group, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, params, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, params, h)
    }
}

/// Pre-norm residual block: `h = x + attn(ln1(x))`, `out = h + ffn(ln2(h))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let group = Group::Backbone;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, group)?,
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, group, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, group)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, group, rng)?,
        })
    }

    /// `sublayer` is applied to each sublayer output before its residual add
    /// (dropout hook); pass the identity for a plain forward.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        key_valid: Option<&[bool]>,
        sublayer: &mut dyn FnMut(&mut Tape<T>, Var) -> Result<Var>,
    ) -> Result<AttentionOutput> {
        let normed = self.ln1.forward(tape, params, x)?;
        let attn = self.attention.forward(tape, params, normed, key_valid)?;
        let a = sublayer(tape, attn.out)?;
        let h = tape.add(x, a)?;
        let normed = self.ln2.forward(tape, params, h)?;
        let f = self.ffn.forward(tape, params, normed)?;
        let f = sublayer(tape, f)?;
        let out = tape.add(h, f)?;
        Ok(AttentionOutput { out, weights: attn.weights })
    }
}
