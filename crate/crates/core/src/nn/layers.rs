use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::{Bound, Group, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `y = x · Wᵀ + b` with `W: [out_dim, in_dim]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights ~ U(-1/sqrt(in_dim), 1/sqrt(in_dim)), bias zero.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("linear", format!("dims {in_dim}->{out_dim}")));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w: Vec<T> = (0..in_dim * out_dim).map(|_| T::from_f64(dist.sample(rng))).collect();
        let weight = store.add(format!("{name}.weight"), group, Tensor::new(vec![out_dim, in_dim], w)?)?;
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(vec![out_dim]))?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let last = tape.value(x).last_dim();
        if last != self.in_dim {
            return Err(Error::shape("linear", tape.shape(x), &[self.out_dim, self.in_dim]));
        }
        tape.affine(x, params.var(self.weight), Some(params.var(self.bias)))
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, group: Group) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::full(vec![dim], T::one()))?;
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(vec![dim]))?;
        Ok(Self { gamma, beta, dim })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, params.var(self.gamma), params.var(self.beta))
    }
}

/// Lookup table `[count, dim]`, initialized N(0, std²).
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        count: usize,
        dim: usize,
        std: f64,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid("embedding", e.to_string()))?;
        let data = (0..count * dim).map(|_| T::from_f64(dist.sample(rng))).collect();
        let table = store.add(format!("{name}.table"), group, Tensor::new(vec![count, dim], data)?)?;
        Ok(Self { table, count, dim })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, ids: &[usize]) -> Result<Var> {
        tape.embedding(params.var(self.table), ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{CounterRng, Purpose};

    fn setup(in_dim: usize, out_dim: usize) -> (ParamStore<f64>, Linear) {
        let mut store = ParamStore::new();
        let mut rng = CounterRng::new(5).stream(Purpose::Init, 0);
        let layer = Linear::new(&mut store, "l", in_dim, out_dim, Group::Backbone, &mut rng).unwrap();
        (store, layer)
    }

    #[test]
    fn zero_layer_gives_zero_output() {
        let (mut store, layer) = setup(3, 2);
        store.value_mut(layer.weight).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::from_f64(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.25, 9.0]).unwrap());
        let y = layer.forward(&mut tape, &b, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let (mut store, layer) = setup(3, 3);
        let w = store.value_mut(layer.weight).data_mut();
        w.fill(0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| false);
        let input = [0.3, -1.5, 2.25, 7.0, 0.0, -0.125];
        let x = tape.constant(Tensor::from_f64(vec![2, 3], &input).unwrap());
        let y = layer.forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(y).data(), &input);
    }

    #[test]
    fn random_layer_matches_dot_products() {
        let (mut store, layer) = setup(3, 2);
        store.value_mut(layer.bias).data_mut().copy_from_slice(&[0.5, -0.25]);
        let w = store.value(layer.weight).data().to_vec();
        let x = [0.2, -0.7, 1.3];
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| false);
        let xv = tape.constant(Tensor::from_f64(vec![1, 3], &x).unwrap());
        let y = layer.forward(&mut tape, &b, xv).unwrap();
        for o in 0..2 {
            let expected: f64 = (0..3).map(|i| w[o * 3 + i] * x[i]).sum::<f64>() + [0.5, -0.25][o];
            assert!((tape.value(y).data()[o] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let (store, layer) = setup(16, 8);
        let bound = 0.25;
        assert!(store.value(layer.weight).data().iter().all(|w| w.abs() <= bound));
        assert!(store.value(layer.bias).data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let (store, layer) = setup(3, 2);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::<f64>::zeros(vec![2, 4]));
        let err = layer.forward(&mut tape, &b, x).unwrap_err();
        assert!(err.to_string().contains("linear"), "{err}");
    }
}
