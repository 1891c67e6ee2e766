//! Multi-view compressed representations: pools of autoencoders applied to a
//! backbone's hidden states during training.
//!
//! At an insertion layer `n`, each step draws `z ~ U[0, 1)`; when
//! `z <= layer_gate_prob` the hidden state is replaced by the output of a
//! uniformly chosen pool member, otherwise it passes through. With token
//! granularity every (batch, position) row draws its own gate and member;
//! with layer granularity one draw covers the whole layer. In eval mode the
//! layer is the identity, which is what makes the pools removable after
//! training.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, AutoencoderSpec, GateDraw, RouteSource, StochasticHae, SubRoute, Vae};
use crate::error::{Error, Result};
use crate::nn::{Bound, Group, ParamStore};
use crate::rng::{CounterRng, DrawKey, Purpose, LAYER_SENTINEL};
use crate::tensor::{c, Scalar, Tape, Var};

pub const DEFAULT_LAYER_GATE_PROB: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Token,
    Layer,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::Token => "token",
            Granularity::Layer => "layer",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Granularity::Token),
            "layer" => Ok(Granularity::Layer),
            _ => Err(Error::Config(format!("unknown granularity `{s}` (token|layer)"))),
        }
    }
}

/// Architecture of the pool members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Hae,
    Ae,
    Vae,
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Hae => "hae",
            PoolKind::Ae => "ae",
            PoolKind::Vae => "vae",
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hae" => Ok(PoolKind::Hae),
            "ae" => Ok(PoolKind::Ae),
            "vae" => Ok(PoolKind::Vae),
            _ => Err(Error::Config(format!("unknown pool kind `{s}` (hae|ae|vae)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvcrConfig {
    /// 1-based indices of the layers whose outputs are augmented.
    pub layers: Vec<usize>,
    /// Compression dimension of each pool member (same pool at every layer).
    pub dims: Vec<usize>,
    pub layer_gate_prob: f64,
    pub sub_skip_prob: f64,
    pub granularity: Granularity,
    pub enabled: bool,
    pub kind: PoolKind,
    /// Sub-autoencoders per HAE.
    pub num_sub: usize,
    /// KL weight for VAE members.
    pub vae_beta: f64,
    pub tanh: bool,
    /// Let the reconstruction loss reach the backbone (off: stop-gradient).
    pub recon_full_flow: bool,
}

impl Default for MvcrConfig {
    fn default() -> Self {
        Self {
            layers: vec![1],
            dims: vec![16, 24, 48],
            layer_gate_prob: DEFAULT_LAYER_GATE_PROB,
            sub_skip_prob: crate::autoencoder::DEFAULT_SUB_SKIP_PROB,
            granularity: Granularity::Token,
            enabled: true,
            kind: PoolKind::Hae,
            num_sub: 1,
            vae_beta: 1e-3,
            tanh: false,
            recon_full_flow: false,
        }
    }
}

impl MvcrConfig {
    /// Checks the config against a backbone of `depth` layers and width `hidden`.
    pub fn validate(&self, depth: usize, hidden: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let Some(&l) = self.layers.iter().find(|&&l| l == 0 || l > depth) {
            return bad(format!("mvcr layer {l} outside 1..={depth}"));
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() {
            return bad(format!("duplicate mvcr layers {:?}", self.layers));
        }
        if self.dims.is_empty() {
            return bad("mvcr pool must have at least one member".into());
        }
        if let Some(&d) = self.dims.iter().find(|&&d| d == 0 || d >= hidden) {
            return bad(format!("mvcr dim {d} must be in 1..{hidden}"));
        }
        if self.kind == PoolKind::Hae {
            if let Some(&d) = self.dims.iter().find(|&&d| self.num_sub > 0 && d < 2) {
                return bad(format!("mvcr dim {d} too small for a sub-autoencoder"));
            }
        }
        for (name, p) in [("layer_gate_prob", self.layer_gate_prob), ("sub_skip_prob", self.sub_skip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("mvcr.{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.vae_beta >= 0.0) {
            return bad(format!("mvcr.vae_beta = {} must be non-negative", self.vae_beta));
        }
        Ok(())
    }

    /// Pool size M.
    pub fn pool_size(&self) -> usize {
        self.dims.len()
    }
}

/// Randomness coordinates shared by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DrawContext {
    pub rng: CounterRng,
    pub step: u64,
}

/// Where a pool member's internal randomness comes from for a set of rows.
#[derive(Debug, Clone, Copy)]
pub struct ViewContext<'a> {
    pub rng: CounterRng,
    pub step: u64,
    pub layer_key: u32,
    /// Token coordinate of every input row.
    pub tokens: &'a [u64],
    /// All rows share one draw.
    pub shared: bool,
    /// Drawing for the reconstruction loss rather than the forward view.
    pub recon: bool,
}

/// A network that maps `[n, d]` rows to another view of the same shape.
pub trait ViewNetwork<T: Scalar> {
    fn dim(&self) -> usize;

    /// The training-time view of `x`. Stochastic sub-routing decisions are
    /// appended to `draws`.
    fn view(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        ctx: &ViewContext<'_>,
        draws: &mut Vec<GateDraw>,
    ) -> Result<Var>;

    /// This member's reconstruction objective on `x`.
    fn recon_loss(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        ctx: &ViewContext<'_>,
        draws: &mut Vec<GateDraw>,
    ) -> Result<Var> {
        let y = self.view(tape, params, x, ctx, draws)?;
        tape.mse(y, x)
    }
}

impl<T: Scalar, V: ViewNetwork<T> + ?Sized> ViewNetwork<T> for Box<V> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn view(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        ctx: &ViewContext<'_>,
        draws: &mut Vec<GateDraw>,
    ) -> Result<Var> {
        (**self).view(tape, params, x, ctx, draws)
    }

    fn recon_loss(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        ctx: &ViewContext<'_>,
        draws: &mut Vec<GateDraw>,
    ) -> Result<Var> {
        (**self).recon_loss(tape, params, x, ctx, draws)
    }
}

#[derive(Debug, Clone)]
pub enum PoolMember {
    Hae(StochasticHae),
    Ae(Autoencoder),
    Vae { vae: Vae, beta: f64 },
}

impl PoolMember {
    pub fn param_count(&self) -> usize {
        match self {
            PoolMember::Hae(h) => h.param_count(),
            PoolMember::Ae(a) => a.param_count(),
            PoolMember::Vae { vae, .. } => vae.param_count(),
        }
    }
}

impl<T: Scalar> ViewNetwork<T> for PoolMember {
    fn dim(&self) -> usize {
        match self {
            PoolMember::Hae(h) => h.input_dim(),
            PoolMember::Ae(a) => a.input_dim(),
            PoolMember::Vae { vae, .. } => vae.input_dim(),
        }
    }

    fn view(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        ctx: &ViewContext<'_>,
        draws: &mut Vec<GateDraw>,
    ) -> Result<Var> {
        match self {
            PoolMember::Hae(h) => {
                let (gate_purpose, choice_purpose) = if ctx.recon {
                    (Purpose::ReconSubGate, Purpose::ReconSubChoice)
                } else {
                    (Purpose::SubGate, Purpose::SubChoice)
                };
                let source = RouteSource {
                    rng: ctx.rng,
                    step: ctx.step,
                    layer: ctx.layer_key,
                    tokens: ctx.tokens,
                    shared: ctx.shared,
                    gate_purpose,
                    choice_purpose,
                };
                h.forward_rows(tape, params, x, &source, draws)
            }
            PoolMember::Ae(a) => a.forward(tape, params, x),
            PoolMember::Vae { vae, .. } => {
                let mut noise = vae_noise(ctx);
                Ok(vae.forward(tape, params, x, Some(&mut noise))?.recon)
            }
        }
    }

    fn recon_loss(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        ctx: &ViewContext<'_>,
        draws: &mut Vec<GateDraw>,
    ) -> Result<Var> {
        match self {
            PoolMember::Vae { vae, beta } => {
                let mut noise = vae_noise(ctx);
                let out = vae.forward(tape, params, x, Some(&mut noise))?;
                let mse = tape.mse(out.recon, x)?;
                let kl = tape.scale(out.kl, c::<T>(*beta));
                tape.add(mse, kl)
            }
            _ => {
                let y = self.view(tape, params, x, ctx, draws)?;
                tape.mse(y, x)
            }
        }
    }
}

fn vae_noise(ctx: &ViewContext<'_>) -> rand_chacha::ChaCha8Rng {
    let tag = ((ctx.recon as u64) << 20) | ctx.layer_key as u64;
    let first = ctx.tokens.first().copied().unwrap_or(LAYER_SENTINEL);
    ctx.rng.stream(Purpose::VaeNoise, (ctx.step << 24) ^ (tag << 44) ^ first)
}

/// The pool attached to one insertion layer.
#[derive(Debug, Clone)]
pub struct HaePool {
    pub layer: usize,
    pub members: Vec<PoolMember>,
}

impl HaePool {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &MvcrConfig,
        layer: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.dims.is_empty() {
            return Err(Error::invalid("hae_pool", "empty pool"));
        }
        let members = cfg
            .dims
            .iter()
            .enumerate()
            .map(|(m, &dim)| {
                let name = format!("hae.l{layer}.m{m}");
                Ok(match cfg.kind {
                    PoolKind::Hae => {
                        let spec = AutoencoderSpec::hierarchical(hidden, dim, cfg.num_sub)?;
                        let mut h = StochasticHae::new(store, &name, &spec, cfg.sub_skip_prob, rng)?;
                        h.set_tanh(cfg.tanh);
                        PoolMember::Hae(h)
                    }
                    PoolKind::Ae => {
                        let mut a = Autoencoder::new(store, &name, hidden, dim, Group::Hae, rng)?;
                        a.tanh = cfg.tanh;
                        PoolMember::Ae(a)
                    }
                    PoolKind::Vae => PoolMember::Vae {
                        vae: Vae::new(store, &name, hidden, dim, Group::Hae, rng)?,
                        beta: cfg.vae_beta,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layer, members })
    }

    pub fn param_count(&self) -> usize {
        self.members.iter().map(PoolMember::param_count).sum()
    }
}

/// One layer-gate decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerGateDraw {
    pub step: u64,
    pub layer: u32,
    /// `None` for a layer-level draw.
    pub token: Option<u64>,
    pub z: f64,
    /// Pool member applied, `None` when the gate passed the input through.
    pub member: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconRecord {
    pub step: u64,
    pub layer: u32,
    pub member: usize,
    pub loss: f64,
}

/// Everything random that happened in the augmented layers.
#[derive(Debug, Clone, Default)]
pub struct AugmentationTrace {
    pub gates: Vec<LayerGateDraw>,
    pub sub_draws: Vec<GateDraw>,
    pub recon: Vec<ReconRecord>,
}

impl AugmentationTrace {
    pub fn clear(&mut self) {
        self.gates.clear();
        self.sub_draws.clear();
        self.recon.clear();
    }

    /// Fraction of gate draws that applied a pool member.
    pub fn apply_rate(&self) -> f64 {
        let n = self.gates.len().max(1);
        self.gates.iter().filter(|g| g.member.is_some()).count() as f64 / n as f64
    }

    /// Fraction of HAE routing draws that bypassed the sub-autoencoders.
    pub fn sub_skip_rate(&self) -> f64 {
        let n = self.sub_draws.len().max(1);
        self.sub_draws.iter().filter(|d| d.route == SubRoute::Skip).count() as f64 / n as f64
    }
}

fn check_pool<T: Scalar, V: ViewNetwork<T>>(pool: &[V], dim: usize) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::invalid("mvcr", "empty pool"));
    }
    if let Some(m) = pool.iter().position(|v| v.dim() != dim) {
        return Err(Error::invalid(
            "mvcr",
            format!("pool member {m} has dim {} but hidden dim is {dim}", pool[m].dim()),
        ));
    }
    Ok(())
}

/// Uniform member index for a draw coordinate.
pub fn choose_member(rng: &CounterRng, step: u64, layer: u32, token: u64, pool_size: usize) -> usize {
    rng.index(DrawKey::new(Purpose::HaeChoice, step, layer, token), pool_size)
}

/// Applies one uniformly chosen pool member to all of `x`.
#[allow(clippy::too_many_arguments)]
pub fn stochastic_select<T: Scalar, V: ViewNetwork<T>>(
    tape: &mut Tape<T>,
    params: &Bound,
    pool: &[V],
    x: Var,
    draw: &DrawContext,
    layer: u32,
    token: u64,
    trace: &mut AugmentationTrace,
) -> Result<(Var, usize)> {
    check_pool(pool, tape.value(x).last_dim())?;
    let m = choose_member(&draw.rng, draw.step, layer, token, pool.len());
    let rows = tape.value(x).rows();
    let tokens = vec![token; rows];
    let ctx =
        ViewContext { rng: draw.rng, step: draw.step, layer_key: layer, tokens: &tokens, shared: true, recon: false };
    let flat_shape = [rows, tape.value(x).last_dim()];
    let shape = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &flat_shape)?;
    let y = pool[m].view(tape, params, flat, &ctx, &mut trace.sub_draws)?;
    let y = tape.reshape(y, &shape)?;
    Ok((y, m))
}

/// The MVCR layer: stochastically replaces rows of `h: [batch, seq, d]` (or
/// `[n, d]`) with pool views. `layer` is 1-based and must be within `depth`.
#[allow(clippy::too_many_arguments)]
pub fn mvcr_layer_forward<T: Scalar, V: ViewNetwork<T>>(
    tape: &mut Tape<T>,
    params: &Bound,
    h: Var,
    pool: &[V],
    cfg: &MvcrConfig,
    layer: usize,
    depth: usize,
    draw: &DrawContext,
    mode: Mode,
    trace: &mut AugmentationTrace,
) -> Result<Var> {
    if layer == 0 || layer > depth {
        return Err(Error::invalid("mvcr", format!("layer {layer} outside 1..={depth}")));
    }
    if mode == Mode::Eval || !cfg.enabled {
        return Ok(h);
    }
    let dim = tape.value(h).last_dim();
    check_pool(pool, dim)?;
    let n = tape.value(h).rows();
    let key = layer as u32;
    let gate = |token: u64| draw.rng.uniform(DrawKey::new(Purpose::LayerGate, draw.step, key, token));

    match cfg.granularity {
        Granularity::Layer => {
            let z = gate(LAYER_SENTINEL);
            let member = (z <= cfg.layer_gate_prob)
                .then(|| choose_member(&draw.rng, draw.step, key, LAYER_SENTINEL, pool.len()));
            trace.gates.push(LayerGateDraw { step: draw.step, layer: key, token: None, z, member });
            let Some(m) = member else { return Ok(h) };
            let tokens: Vec<u64> = (0..n as u64).collect();
            let ctx = ViewContext {
                rng: draw.rng,
                step: draw.step,
                layer_key: key,
                tokens: &tokens,
                shared: true,
                recon: false,
            };
            let shape = tape.shape(h).to_vec();
            let flat = tape.reshape(h, &[n, dim])?;
            let y = pool[m].view(tape, params, flat, &ctx, &mut trace.sub_draws)?;
            tape.reshape(y, &shape)
        }
        Granularity::Token => {
            let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); pool.len()];
            for row in 0..n {
                let token = row as u64;
                let z = gate(token);
                let member =
                    (z <= cfg.layer_gate_prob).then(|| choose_member(&draw.rng, draw.step, key, token, pool.len()));
                if let Some(m) = member {
                    assigned[m].push(row);
                }
                trace.gates.push(LayerGateDraw { step: draw.step, layer: key, token: Some(token), z, member });
            }
            if assigned.iter().all(Vec::is_empty) {
                return Ok(h);
            }
            let shape = tape.shape(h).to_vec();
            let flat = tape.reshape(h, &[n, dim])?;
            let mut parts = Vec::new();
            for (m, rows) in assigned.into_iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                let tokens: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
                let ctx = ViewContext {
                    rng: draw.rng,
                    step: draw.step,
                    layer_key: key,
                    tokens: &tokens,
                    shared: false,
                    recon: false,
                };
                let sel = tape.gather_rows(flat, &rows)?;
                let y = pool[m].view(tape, params, sel, &ctx, &mut trace.sub_draws)?;
                parts.push((y, rows));
            }
            let merged = tape.merge_rows(flat, parts)?;
            tape.reshape(merged, &shape)
        }
    }
}

/// Reconstruction loss at one insertion layer: the mean over all `M` pool
/// members of the mean squared error between `h` and the member's
/// reconstruction of it. `rows` restricts the loss to the given (non-padding)
/// rows of the flattened `h`. Unless `cfg.recon_full_flow` is set, `h` is
/// detached so the loss reaches only the pool's parameters.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_loss<T: Scalar, V: ViewNetwork<T>>(
    tape: &mut Tape<T>,
    params: &Bound,
    h: Var,
    pool: &[V],
    cfg: &MvcrConfig,
    layer: usize,
    rows: Option<&[usize]>,
    draw: &DrawContext,
    trace: &mut AugmentationTrace,
) -> Result<Var> {
    let dim = tape.value(h).last_dim();
    check_pool(pool, dim)?;
    let n = tape.value(h).rows();
    let source = if cfg.recon_full_flow { h } else { tape.detach(h) };
    let flat = tape.reshape(source, &[n, dim])?;
    let (x, tokens): (Var, Vec<u64>) = match rows {
        Some(rows) if rows.len() != n => {
            if rows.is_empty() {
                return Err(Error::invalid("reconstruction_loss", "no rows selected"));
            }
            (tape.gather_rows(flat, rows)?, rows.iter().map(|&r| r as u64).collect())
        }
        _ => (flat, (0..n as u64).collect()),
    };
    let mut total: Option<Var> = None;
    for (m, member) in pool.iter().enumerate() {
        let ctx = ViewContext {
            rng: draw.rng,
            step: draw.step,
            layer_key: recon_layer_key(layer, m),
            tokens: &tokens,
            shared: cfg.granularity == Granularity::Layer,
            recon: true,
        };
        let loss = member.recon_loss(tape, params, x, &ctx, &mut trace.sub_draws)?;
        trace.recon.push(ReconRecord {
            step: draw.step,
            layer: layer as u32,
            member: m,
            loss: tape.value(loss).data()[0].as_f64(),
        });
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.expect("pool checked non-empty");
    Ok(tape.scale(total, c::<T>(1.0 / pool.len() as f64)))
}

/// Layer coordinate for reconstruction draws, distinct per pool member.
pub fn recon_layer_key(layer: usize, member: usize) -> u32 {
    (layer * 64 + member) as u32
}
