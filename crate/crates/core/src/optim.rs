//! Adam with per-parameter state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{c, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

/// Adam state over the parameters of one store. Moments are created lazily
/// the first time a parameter receives a gradient.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: Vec::new() }
    }

    /// Number of updates applied to `id`.
    pub fn steps(&self, id: ParamId) -> u64 {
        self.state.get(id.index()).and_then(|s| s.as_ref()).map_or(0, |s| s.steps)
    }

    /// First and second moments of `id`, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        self.state.get(id.index()).and_then(|s| s.as_ref()).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    /// One Adam update with learning rate `lr` for each `(id, gradient)`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid("adam", format!("learning rate {lr} must be positive")));
        }
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, g) in grads {
            let w = store.value_mut(*id);
            if w.shape() != g.shape() {
                return Err(Error::shape("adam", w.shape(), g.shape()));
            }
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![T::zero(); g.numel()],
                v: vec![T::zero(); g.numel()],
                steps: 0,
            });
            st.steps += 1;
            let t = st.steps as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (b1, b2) = (c::<T>(beta1), c::<T>(beta2));
            let (one_b1, one_b2) = (c::<T>(1.0 - beta1), c::<T>(1.0 - beta2));
            let step = c::<T>(lr / bc1);
            let inv_bc2 = c::<T>(1.0 / bc2);
            let eps = c::<T>(eps);
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
