//! Mini transformer encoder with sequence- and token-level heads, and MVCR
//! pools after any subset of its layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mvcr::{mvcr_layer_forward, reconstruction_loss, AugmentationTrace, DrawContext, HaePool, Mode, MvcrConfig};
use crate::nn::{dropout, gaussian_noise, Bound, Embedding, EncoderBlock, Group, LayerNorm, Linear, ParamStore};
use crate::rng::{CounterRng, Purpose};
use crate::tensor::{Scalar, Tape, Var};

/// Init std of token and position embeddings.
const EMBEDDING_STD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sequence,
    Token,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sequence => "sequence",
            Task::Token => "token",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" | "seq" => Ok(Task::Sequence),
            "token" | "tag" => Ok(Task::Token),
            _ => Err(Error::Config(format!("unknown task `{s}` (sequence|token)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub task: Task,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 128,
            vocab_size: 256,
            max_seq_len: 32,
            task: Task::Sequence,
            num_classes: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_layers == 0 {
            return bad("encoder needs at least one layer".into());
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!("hidden dim {} not divisible by {} heads", self.hidden_dim, self.heads));
        }
        for (name, v) in [("ffn_dim", self.ffn_dim), ("vocab_size", self.vocab_size), ("max_seq_len", self.max_seq_len)]
        {
            if v == 0 {
                return bad(format!("model.{name} must be positive"));
            }
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    None,
    /// One class per example.
    Sequence(Vec<usize>),
    /// One optional tag per (example, position); `None` is ignored by the loss.
    Tokens(Vec<Option<usize>>),
}

/// A padded batch of token ids, row-major `[batch, seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    /// False at padding positions.
    pub valid: Vec<bool>,
    pub labels: Labels,
}

impl Batch {
    pub fn new(ids: Vec<usize>, batch: usize, seq: usize, valid: Vec<bool>, labels: Labels) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq || valid.len() != ids.len() {
            return Err(Error::shape("batch", &[batch, seq], &[ids.len(), valid.len()]));
        }
        match &labels {
            Labels::Sequence(l) if l.len() != batch => {
                return Err(Error::shape("batch labels", &[batch], &[l.len()]));
            }
            Labels::Tokens(l) if l.len() != batch * seq => {
                return Err(Error::shape("batch labels", &[batch, seq], &[l.len()]));
            }
            _ => {}
        }
        Ok(Self { ids, batch, seq, valid, labels })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// Flattened indices of non-padding positions.
    pub fn valid_rows(&self) -> Vec<usize> {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect()
    }
}

/// Per-forward switches.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Train mode runs the stochastic MVCR path; eval mode plugs it out.
    pub mvcr_mode: Mode,
    /// Dropout probability on embeddings and sublayer outputs.
    pub dropout: f64,
    /// Scale of Gaussian noise added to every layer output.
    pub noise_scale: f64,
    pub draw: DrawContext,
}

impl ForwardOptions {
    /// Deterministic forward: no MVCR, no dropout, no noise.
    pub fn eval() -> Self {
        Self {
            mvcr_mode: Mode::Eval,
            dropout: 0.0,
            noise_scale: 0.0,
            draw: DrawContext { rng: CounterRng::new(0), step: 0 },
        }
    }

    pub fn train(rng: CounterRng, step: u64) -> Self {
        Self { mvcr_mode: Mode::Train, draw: DrawContext { rng, step }, ..Self::eval() }
    }
}

#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final hidden states after the output layer norm, `[batch, seq, d]`.
    pub hidden: Var,
    /// Output of each layer before augmentation, `layer_outputs[n - 1] = h_n`.
    pub layer_outputs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct TaskOutput {
    pub loss: Option<Var>,
    /// `[batch, classes]` or `[batch * seq, classes]`.
    pub logits: Var,
    pub encoded: Encoded,
}

/// Attached MVCR configuration and pools.
#[derive(Debug, Clone)]
pub struct Mvcr {
    pub config: MvcrConfig,
    pub pools: Vec<HaePool>,
}

impl Mvcr {
    pub fn pool(&self, layer: usize) -> Option<&HaePool> {
        self.pools.iter().find(|p| p.layer == layer)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderModel<T> {
    pub config: EncoderConfig,
    pub store: ParamStore<T>,
    pub tokens: Embedding,
    pub positions: Embedding,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    pub mvcr: Option<Mvcr>,
}

impl<T: Scalar> EncoderModel<T> {
    /// Backbone, head and pools are initialized from separate streams of
    /// `seed`, so attaching MVCR never changes the backbone's initial weights.
    pub fn new(config: EncoderConfig, mvcr: Option<MvcrConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = CounterRng::new(seed);
        let mut store = ParamStore::new();
        let d = config.hidden_dim;
        let mut init = rng.stream(Purpose::Init, 0);
        let tokens = Embedding::new(
            &mut store,
            "backbone.tokens",
            config.vocab_size,
            d,
            EMBEDDING_STD,
            Group::Backbone,
            &mut init,
        )?;
        let positions = Embedding::new(
            &mut store,
            "backbone.positions",
            config.max_seq_len,
            d,
            EMBEDDING_STD,
            Group::Backbone,
            &mut init,
        )?;
        let blocks = (1..=config.num_layers)
            .map(|n| {
                EncoderBlock::new(&mut store, &format!("backbone.layer{n}"), d, config.heads, config.ffn_dim, &mut init)
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut store, "backbone.final_norm", d, Group::Backbone)?;
        let mut head_init = rng.stream(Purpose::Init, 2);
        let head = Linear::new(&mut store, "head.out", d, config.num_classes, Group::Head, &mut head_init)?;
        let mvcr = match mvcr {
            None => None,
            Some(cfg) => {
                cfg.validate(config.num_layers, d)?;
                let mut hae_init = rng.stream(Purpose::Init, 1);
                let mut layers = cfg.layers.clone();
                layers.sort_unstable();
                let pools = layers
                    .iter()
                    .map(|&l| HaePool::new(&mut store, &cfg, l, d, &mut hae_init))
                    .collect::<Result<Vec<_>>>()?;
                Some(Mvcr { config: cfg, pools })
            }
        };
        Ok(Self { config, store, tokens, positions, blocks, final_norm, head, mvcr })
    }

    pub fn param_count(&self, group: Group) -> usize {
        self.store.count(group)
    }

    /// The same model without its pools: HAE parameters are dropped and the
    /// forward path has no MVCR branch.
    pub fn plug_out(&self) -> Result<Self> {
        let mut vanilla = Self::new(self.config.clone(), None, 0)?;
        let copied = vanilla.store.copy_matching(&self.store)?;
        if copied != vanilla.store.len() {
            return Err(Error::invalid("plug_out", format!("copied {copied} of {} parameters", vanilla.store.len())));
        }
        Ok(vanilla)
    }

    /// Runs the encoder over `batch`. Augmentation draws are appended to `trace`.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        batch: &Batch,
        opts: &ForwardOptions,
        trace: &mut AugmentationTrace,
    ) -> Result<Encoded> {
        let (b, s, d) = (batch.batch, batch.seq, self.config.hidden_dim);
        if s > self.config.max_seq_len {
            return Err(Error::invalid(
                "encode",
                format!("sequence length {s} exceeds max_seq_len {}", self.config.max_seq_len),
            ));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(
                "encode",
                format!("token id {bad} outside vocabulary of {}", self.config.vocab_size),
            ));
        }
        let regularize = opts.mvcr_mode == Mode::Train;
        let mut noise = opts.draw.rng.stream(Purpose::Dropout, opts.draw.step);
        let mut gn = opts.draw.rng.stream(Purpose::GaussianNoise, opts.draw.step);
        let p = if regularize { opts.dropout } else { 0.0 };

        let tok = self.tokens.forward(tape, params, &batch.ids)?;
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let pos = self.positions.forward(tape, params, &pos_ids)?;
        let h = tape.add(tok, pos)?;
        let h = dropout(tape, h, p, regularize, &mut noise)?;
        let mut h = tape.reshape(h, &[b, s, d])?;

        let key_valid = batch.valid.iter().any(|v| !v).then_some(batch.valid.as_slice());
        let mut layer_outputs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let n = i + 1;
            let mut hook = |tape: &mut Tape<T>, x: Var| dropout(tape, x, p, regularize, &mut noise);
            h = block.forward(tape, params, h, key_valid, &mut hook)?.out;
            if regularize && opts.noise_scale > 0.0 {
                h = gaussian_noise(tape, h, opts.noise_scale, &mut gn)?;
            }
            layer_outputs.push(h);
            if let Some(pool) = self.mvcr.as_ref().and_then(|m| m.pool(n)) {
                let cfg = &self.mvcr.as_ref().expect("pool implies mvcr").config;
                h = mvcr_layer_forward(
                    tape,
                    params,
                    h,
                    &pool.members,
                    cfg,
                    n,
                    self.config.num_layers,
                    &opts.draw,
                    opts.mvcr_mode,
                    trace,
                )?;
            }
        }
        let hidden = self.final_norm.forward(tape, params, h)?;
        Ok(Encoded { hidden, layer_outputs })
    }

    /// Encoder plus task head; the loss is present when the batch has labels.
    pub fn task_forward(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        batch: &Batch,
        opts: &ForwardOptions,
        trace: &mut AugmentationTrace,
    ) -> Result<TaskOutput> {
        let encoded = self.encode(tape, params, batch, opts, trace)?;
        let (b, s, d) = (batch.batch, batch.seq, self.config.hidden_dim);
        let flat = tape.reshape(encoded.hidden, &[b * s, d])?;
        let (logits, loss) = match self.config.task {
            Task::Sequence => {
                let first: Vec<usize> = (0..b).map(|i| i * s).collect();
                let pooled = tape.gather_rows(flat, &first)?;
                let logits = self.head.forward(tape, params, pooled)?;
                let loss = match &batch.labels {
                    Labels::Sequence(l) => {
                        let targets: Vec<Option<usize>> = l.iter().map(|&c| Some(c)).collect();
                        Some(tape.cross_entropy(logits, &targets)?)
                    }
                    Labels::Tokens(_) => {
                        return Err(Error::invalid("task_forward", "token labels for a sequence task"));
                    }
                    Labels::None => None,
                };
                (logits, loss)
            }
            Task::Token => {
                let logits = self.head.forward(tape, params, flat)?;
                let loss = match &batch.labels {
                    Labels::Tokens(l) => {
                        let targets: Vec<Option<usize>> =
                            l.iter().zip(&batch.valid).map(|(&t, &ok)| if ok { t } else { None }).collect();
                        Some(tape.cross_entropy(logits, &targets)?)
                    }
                    Labels::Sequence(_) => {
                        return Err(Error::invalid("task_forward", "sequence labels for a token task"));
                    }
                    Labels::None => None,
                };
                (logits, loss)
            }
        };
        Ok(TaskOutput { loss, logits, encoded })
    }

    /// Sum over insertion layers of the pool reconstruction losses at that
    /// layer's output, over non-padding positions. `None` without MVCR.
    pub fn reconstruction_loss(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        batch: &Batch,
        encoded: &Encoded,
        draw: &DrawContext,
        trace: &mut AugmentationTrace,
    ) -> Result<Option<Var>> {
        let Some(mvcr) = &self.mvcr else { return Ok(None) };
        let rows = batch.valid_rows();
        let mut total: Option<Var> = None;
        for pool in &mvcr.pools {
            let h = encoded.layer_outputs[pool.layer - 1];
            let l = reconstruction_loss(
                tape,
                params,
                h,
                &pool.members,
                &mvcr.config,
                pool.layer,
                Some(&rows),
                draw,
                trace,
            )?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(total)
    }

    /// Predicted class per example (sequence task) or per position (token task).
    pub fn predict(&self, batch: &Batch, opts: &ForwardOptions) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape, |_| false);
        let mut trace = AugmentationTrace::default();
        let out = self.task_forward(&mut tape, &params, batch, opts, &mut trace)?;
        Ok(argmax_rows(tape.value(out.logits).data(), self.config.num_classes))
    }
}

pub fn argmax_rows<T: Scalar>(data: &[T], width: usize) -> Vec<usize> {
    data.chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
