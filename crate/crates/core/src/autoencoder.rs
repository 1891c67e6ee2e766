//! Autoencoders used as view generators.
//!
//! * [`Autoencoder`]: `o = U(D(x))`, a down-projection `D: d -> d̂` followed by
//!   an up-projection `U: d̂ -> d`.
//! * [`StochasticHae`]: an outer autoencoder whose code can be routed through
//!   one of a pool of nested sub-autoencoders `d̂ -> d̂/2 -> d̂`. Each forward
//!   draws `z ~ U[0, 1)`; when `z <= sub_skip_prob` the sub-autoencoders are
//!   bypassed (`U(D(x))`), otherwise a uniformly chosen sub-autoencoder is
//!   applied to the code (`U(U'(D'(D(x))))`).
//! * [`Vae`]: diagonal-Gaussian variational autoencoder, used as an ablation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Bound, Group, Linear, ParamStore};
use crate::rng::{CounterRng, DrawKey, Purpose, LAYER_SENTINEL};
use crate::tensor::{c, Scalar, Tape, Var};

/// Probability of bypassing the sub-autoencoders.
pub const DEFAULT_SUB_SKIP_PROB: f64 = 0.3;

/// Dimensions of a (hierarchical) autoencoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutoencoderSpec {
    pub input_dim: usize,
    pub compression_dim: usize,
    pub sub_dims: Vec<usize>,
}

impl AutoencoderSpec {
    pub fn new(input_dim: usize, compression_dim: usize, sub_dims: Vec<usize>) -> Result<Self> {
        if compression_dim == 0 || compression_dim >= input_dim {
            return Err(Error::invalid(
                "autoencoder",
                format!("compression dim {compression_dim} must be in 1..{input_dim}"),
            ));
        }
        if let Some(&bad) = sub_dims.iter().find(|&&s| s == 0 || s >= compression_dim) {
            return Err(Error::invalid("autoencoder", format!("sub dim {bad} must be in 1..{compression_dim}")));
        }
        Ok(Self { input_dim, compression_dim, sub_dims })
    }

    /// Outer AE `d -> d̂` with `count` sub-autoencoders of width `d̂ / 2`.
    pub fn hierarchical(input_dim: usize, compression_dim: usize, count: usize) -> Result<Self> {
        Self::new(input_dim, compression_dim, vec![compression_dim / 2; count])
    }
}

/// Which path a hierarchical autoencoder takes for a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubRoute {
    /// `U(D(x))`.
    Skip,
    /// `U(U'ᵢ(D'ᵢ(D(x))))`.
    Sub(usize),
}

/// Record of one stochastic routing decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDraw {
    pub step: u64,
    pub layer: u32,
    /// `None` for a draw shared by a whole layer.
    pub token: Option<u64>,
    pub z: f64,
    pub route: SubRoute,
}

/// Where per-row routing randomness comes from.
#[derive(Debug, Clone, Copy)]
pub struct RouteSource<'a> {
    pub rng: CounterRng,
    pub step: u64,
    /// Layer coordinate of the draw key.
    pub layer: u32,
    /// Token coordinate for each row; ignored when `shared`.
    pub tokens: &'a [u64],
    /// One draw for every row.
    pub shared: bool,
    pub gate_purpose: Purpose,
    pub choice_purpose: Purpose,
}

impl RouteSource<'_> {
    fn token(&self, row: usize) -> u64 {
        if self.shared {
            LAYER_SENTINEL
        } else {
            self.tokens[row]
        }
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub down: Linear,
    pub up: Linear,
    /// Insert `tanh` between `D` and `U`.
    pub tanh: bool,
}

impl Autoencoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        compression_dim: usize,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        AutoencoderSpec::new(input_dim, compression_dim, Vec::new())?;
        Ok(Self {
            down: Linear::new(store, &format!("{name}.down"), input_dim, compression_dim, group, rng)?,
            up: Linear::new(store, &format!("{name}.up"), compression_dim, input_dim, group, rng)?,
            tanh: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.down.in_dim
    }

    pub fn compression_dim(&self) -> usize {
        self.down.out_dim
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        if tape.value(x).last_dim() != self.input_dim() {
            return Err(Error::shape("autoencoder", tape.shape(x), &[self.input_dim(), self.compression_dim()]));
        }
        let h = self.down.forward(tape, params, x)?;
        Ok(if self.tanh { tape.tanh(h) } else { h })
    }

    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, code: Var) -> Result<Var> {
        self.up.forward(tape, params, code)
    }

    /// `U(D(x))` over the trailing axis of `x`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let code = self.encode(tape, params, x)?;
        self.decode(tape, params, code)
    }

    pub fn param_count(&self) -> usize {
        self.down.param_count() + self.up.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct StochasticHae {
    pub outer: Autoencoder,
    pub subs: Vec<Autoencoder>,
    pub sub_skip_prob: f64,
}

impl StochasticHae {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &AutoencoderSpec,
        sub_skip_prob: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&sub_skip_prob) {
            return Err(Error::invalid("hae", format!("sub skip probability {sub_skip_prob}")));
        }
        let outer = Autoencoder::new(store, name, spec.input_dim, spec.compression_dim, Group::Hae, rng)?;
        let subs = spec
            .sub_dims
            .iter()
            .enumerate()
            .map(|(i, &dim)| {
                Autoencoder::new(store, &format!("{name}.sub{i}"), spec.compression_dim, dim, Group::Hae, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { outer, subs, sub_skip_prob })
    }

    pub fn set_tanh(&mut self, on: bool) {
        self.outer.tanh = on;
        for s in &mut self.subs {
            s.tanh = on;
        }
    }

    pub fn input_dim(&self) -> usize {
        self.outer.input_dim()
    }

    pub fn compression_dim(&self) -> usize {
        self.outer.compression_dim()
    }

    /// Deterministic forward along one route.
    pub fn forward_route<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, x: Var, route: SubRoute) -> Result<Var> {
        let code = self.outer.encode(tape, params, x)?;
        let code = match route {
            SubRoute::Skip => code,
            SubRoute::Sub(i) => {
                let sub = self
                    .subs
                    .get(i)
                    .ok_or_else(|| Error::invalid("hae", format!("sub-autoencoder {i} of {}", self.subs.len())))?;
                sub.forward(tape, params, code)?
            }
        };
        self.outer.decode(tape, params, code)
    }

    /// Draws a route from the counter-based generator.
    pub fn draw_route(&self, rng: &CounterRng, gate: DrawKey, choice: DrawKey) -> (f64, SubRoute) {
        let z = rng.uniform(gate);
        if z <= self.sub_skip_prob || self.subs.is_empty() {
            (z, SubRoute::Skip)
        } else {
            (z, SubRoute::Sub(rng.index(choice, self.subs.len())))
        }
    }

    /// One draw for the whole input.
    pub fn stochastic_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        rng: &CounterRng,
        step: u64,
        layer: u32,
    ) -> Result<(Var, GateDraw)> {
        let (z, route) = self.draw_route(
            rng,
            DrawKey::layer_level(Purpose::SubGate, step, layer),
            DrawKey::layer_level(Purpose::SubChoice, step, layer),
        );
        let out = self.forward_route(tape, params, x, route)?;
        Ok((out, GateDraw { step, layer, token: None, z, route }))
    }

    /// Routes each row of `x: [n, d]` independently (or all rows together
    /// when `source.shared`). The outer encoder and decoder run once over all
    /// rows; each sub-autoencoder runs over the rows routed to it.
    pub fn forward_rows<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        source: &RouteSource<'_>,
        draws: &mut Vec<GateDraw>,
    ) -> Result<Var> {
        let n = tape.value(x).rows();
        let mut routes = Vec::with_capacity(n);
        let shared_draw = source.shared.then(|| {
            self.draw_route(
                &source.rng,
                DrawKey::layer_level(source.gate_purpose, source.step, source.layer),
                DrawKey::layer_level(source.choice_purpose, source.step, source.layer),
            )
        });
        for row in 0..n {
            let (z, route) = match shared_draw {
                Some(d) => d,
                None => {
                    let t = source.token(row);
                    self.draw_route(
                        &source.rng,
                        DrawKey::new(source.gate_purpose, source.step, source.layer, t),
                        DrawKey::new(source.choice_purpose, source.step, source.layer, t),
                    )
                }
            };
            if row == 0 || shared_draw.is_none() {
                draws.push(GateDraw {
                    step: source.step,
                    layer: source.layer,
                    token: (!source.shared).then(|| source.token(row)),
                    z,
                    route,
                });
            }
            routes.push(route);
        }
        self.forward_routes(tape, params, x, &routes)
    }

    /// Forward with an explicit route per row of `x: [n, d]`.
    pub fn forward_routes<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        routes: &[SubRoute],
    ) -> Result<Var> {
        if routes.len() != tape.value(x).rows() {
            return Err(Error::shape("hae", tape.shape(x), &[routes.len()]));
        }
        if let Some(&first) = routes.first() {
            if routes.iter().all(|&r| r == first) {
                return self.forward_route(tape, params, x, first);
            }
        }
        if let Some(bad) = routes.iter().find(|r| matches!(r, SubRoute::Sub(i) if *i >= self.subs.len())) {
            return Err(Error::invalid("hae", format!("route {bad:?} with {} subs", self.subs.len())));
        }
        let code = self.outer.encode(tape, params, x)?;
        let mut parts = Vec::new();
        for (i, sub) in self.subs.iter().enumerate() {
            let rows: Vec<usize> =
                routes.iter().enumerate().filter(|(_, &r)| r == SubRoute::Sub(i)).map(|(row, _)| row).collect();
            if rows.is_empty() {
                continue;
            }
            let sel = tape.gather_rows(code, &rows)?;
            let recon = sub.forward(tape, params, sel)?;
            parts.push((recon, rows));
        }
        let code = tape.merge_rows(code, parts)?;
        self.outer.decode(tape, params, code)
    }

    /// Mean squared distance between each sub-autoencoder's reconstruction of
    /// the code `D(x)` and the code itself, averaged over sub-autoencoders.
    pub fn sub_path_discrepancy<T: Scalar>(&self, store: &ParamStore<T>, x: &crate::tensor::Tensor<T>) -> Result<f64> {
        if self.subs.is_empty() {
            return Ok(0.0);
        }
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let code = self.outer.encode(&mut tape, &params, xv)?;
        let mut total = 0.0;
        for sub in &self.subs {
            let recon = sub.forward(&mut tape, &params, code)?;
            let d = tape.mse(recon, code)?;
            total += tape.value(d).data()[0].as_f64();
        }
        Ok(total / self.subs.len() as f64)
    }

    pub fn param_count(&self) -> usize {
        self.outer.param_count() + self.subs.iter().map(Autoencoder::param_count).sum::<usize>()
    }
}

/// Output of a VAE forward.
#[derive(Debug, Clone, Copy)]
pub struct VaeOutput {
    pub recon: Var,
    /// `KL(N(μ, σ²) ‖ N(0, I))`, summed over latent dims and averaged over rows.
    pub kl: Var,
    pub mean: Var,
    pub log_var: Var,
}

#[derive(Debug, Clone)]
pub struct Vae {
    /// `d -> 2 d̂`: mean in the first half, log-variance in the second.
    pub encoder: Linear,
    pub decoder: Linear,
    pub latent_dim: usize,
}

impl Vae {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        latent_dim: usize,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        AutoencoderSpec::new(input_dim, latent_dim, Vec::new())?;
        Ok(Self {
            encoder: Linear::new(store, &format!("{name}.encoder"), input_dim, 2 * latent_dim, group, rng)?,
            decoder: Linear::new(store, &format!("{name}.decoder"), latent_dim, input_dim, group, rng)?,
            latent_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim
    }

    /// Encodes `x: [..., d]`; with `sample` the latent is `μ + σ ⊙ ε`, otherwise
    /// the mean is decoded.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        sample: Option<&mut dyn rand::RngCore>,
    ) -> Result<VaeOutput> {
        let stats = self.encoder.forward(tape, params, x)?;
        let axis = tape.shape(stats).len() - 1;
        let mean = tape.slice(stats, axis, 0, self.latent_dim)?;
        let log_var = tape.slice(stats, axis, self.latent_dim, self.latent_dim)?;
        if let Some(i) = tape.value(log_var).data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vae log-variance at element {i}")));
        }
        let latent = match sample {
            Some(rng) => {
                let half = tape.scale(log_var, c::<T>(0.5));
                let std = tape.exp(half);
                let eps = (0..tape.value(std).numel()).map(|_| c::<T>(StandardNormal.sample(rng))).collect();
                let noise = tape.mul_const(std, eps)?;
                tape.add(mean, noise)?
            }
            None => mean,
        };
        let recon = self.decoder.forward(tape, params, latent)?;
        let kl = kl_to_standard_normal(tape, mean, log_var)?;
        Ok(VaeOutput { recon, kl, mean, log_var })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }
}

/// `½ Σⱼ (μⱼ² + σⱼ² − 1 − ln σⱼ²)`, averaged over rows.
pub fn kl_to_standard_normal<T: Scalar>(tape: &mut Tape<T>, mean: Var, log_var: Var) -> Result<Var> {
    let rows = tape.value(mean).rows();
    let latent = tape.value(mean).last_dim();
    let mu2 = tape.mul(mean, mean)?;
    let var = tape.exp(log_var);
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, log_var)?;
    let total = tape.sum(t);
    let per_row = tape.scale(total, c::<T>(0.5 / rows as f64));
    tape.add_const(per_row, &[c::<T>(-0.5 * latent as f64)])
}
