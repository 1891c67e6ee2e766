//! Baseline regularizers: dropout, additive Gaussian noise, weight decay
//! toward the initial parameters, and mixout.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{c, Scalar, Tape, Tensor, Var};

/// Scale of the Gaussian-noise baseline: `x + 0.002 · N(0, I)`.
pub const GAUSSIAN_NOISE_SCALE: f64 = 0.002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Dropout,
    GaussianNoise,
    WeightDecayToInit,
    Mixout,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] =
        [BaselineKind::Dropout, BaselineKind::GaussianNoise, BaselineKind::WeightDecayToInit, BaselineKind::Mixout];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Dropout => "dropout",
            BaselineKind::GaussianNoise => "gaussian_noise",
            BaselineKind::WeightDecayToInit => "weight_decay_to_init",
            BaselineKind::Mixout => "mixout",
        }
    }

    /// The strength grid searched for this baseline.
    pub fn grid(self) -> &'static [f64] {
        match self {
            BaselineKind::Dropout => &[0.25, 0.5, 0.75],
            BaselineKind::WeightDecayToInit => &[0.25, 0.5, 0.75],
            BaselineKind::Mixout => &[1e-1, 1e-2, 1e-3],
            BaselineKind::GaussianNoise => &[GAUSSIAN_NOISE_SCALE],
        }
    }

    fn is_probability(self) -> bool {
        matches!(self, BaselineKind::Dropout | BaselineKind::Mixout)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dropout" => Ok(BaselineKind::Dropout),
            "gaussian_noise" | "gn" => Ok(BaselineKind::GaussianNoise),
            "weight_decay_to_init" | "wd" => Ok(BaselineKind::WeightDecayToInit),
            "mixout" => Ok(BaselineKind::Mixout),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

/// A validated baseline regularizer setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub strength: f64,
}

impl Baseline {
    pub fn new(kind: BaselineKind, strength: f64) -> Result<Self> {
        if !strength.is_finite() || strength < 0.0 {
            return Err(Error::invalid(
                "baseline",
                format!("{kind} strength {strength} must be finite and non-negative"),
            ));
        }
        if kind.is_probability() && strength > 1.0 {
            return Err(Error::invalid("baseline", format!("{kind} probability {strength} outside [0, 1]")));
        }
        Ok(Self { kind, strength })
    }
}

/// Inverted dropout: zero each element with probability `p` and rescale the
/// survivors by `1 / (1 - p)`. Identity when `train` is false or `p == 0`.
pub fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1]")));
    }
    if !train || p == 0.0 {
        return Ok(x);
    }
    let keep = if p < 1.0 { c::<T>(1.0 / (1.0 - p)) } else { T::zero() };
    let mask = (0..tape.value(x).numel()).map(|_| if rng.random::<f64>() >= p { keep } else { T::zero() }).collect();
    tape.mul_const(x, mask)
}

/// `x + scale · N(0, I)`.
pub fn gaussian_noise<T: Scalar>(tape: &mut Tape<T>, x: Var, scale: f64, rng: &mut impl Rng) -> Result<Var> {
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::invalid("gaussian_noise", format!("scale {scale}")));
    }
    let noise: Vec<T> = (0..tape.value(x).numel())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            c::<T>(scale * z)
        })
        .collect();
    tape.add_const(x, &noise)
}

/// Penalty `λ/2 · Σ ‖w − w₀‖²` over `ids`, on the tape.
pub fn weight_decay_to_init<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    init: &ParamStore<T>,
    ids: &[ParamId],
    lambda: f64,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &id in ids {
        let w = params.var(id);
        let w0 = tape.constant(init.value(id).clone());
        let diff = tape.sub(w, w0)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| tape.scale(t, c::<T>(lambda / 2.0))))
}

/// Resets each element of the `ids` parameters to its initial value with
/// probability `p`. Returns the number of elements reset.
pub fn mixout<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &ParamStore<T>,
    ids: &[ParamId],
    p: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("mixout", format!("probability {p} outside [0, 1]")));
    }
    let mut reset = 0;
    for &id in ids {
        let src: &Tensor<T> = init.value(id);
        let dst = store.value_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::shape("mixout", dst.shape(), src.shape()));
        }
        for (w, &w0) in dst.data_mut().iter_mut().zip(src.data()) {
            if rng.random::<f64>() < p {
                *w = w0;
                reset += 1;
            }
        }
    }
    Ok(reset)
}
