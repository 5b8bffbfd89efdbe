//! Parameterized building blocks: same-padded convolutions, layer norm, FFN.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// He-normal weight source: `N(0, 2 / fan_in)`, deterministic per seed.
pub struct HeInit {
    rng: ChaCha8Rng,
}

impl HeInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut self.rng)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// A `k×k` same-padded convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut HeInit,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.sample(&[k, k, cin, cout], k * k * cin),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            k,
            cin,
            cout,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d_same(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Two 1×1 convolutions, `C → r·C → C`, with an activation between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnWeights {
    pub expand: Conv,
    pub project: Conv,
    pub ratio: usize,
    pub activation: Activation,
}

impl FfnWeights {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut HeInit,
        name: &str,
        c: usize,
        ratio: usize,
        activation: Activation,
    ) -> Self {
        let ratio = ratio.max(1);
        Self {
            expand: Conv::new(store, init, &format!("{name}.expand"), 1, c, ratio * c),
            project: Conv::new(store, init, &format!("{name}.project"), 1, ratio * c, c),
            ratio,
            activation,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.expand.forward(tape, store, x)?;
        let h = self.activation.apply(tape, h)?;
        self.project.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_init_is_seeded() {
        let a: Tensor<f32> = HeInit::new(7).sample(&[3, 3, 4, 4], 36);
        let b: Tensor<f32> = HeInit::new(7).sample(&[3, 3, 4, 4], 36);
        let c: Tensor<f32> = HeInit::new(8).sample(&[3, 3, 4, 4], 36);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn conv_biases_start_at_zero() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv::new(&mut store, &mut HeInit::new(0), "c", 3, 2, 5);
        assert!(store.value(conv.bias).data().iter().all(|&b| b == 0.0));
        assert_eq!(store.value(conv.weight).shape(), &[3, 3, 2, 5]);
        assert_eq!(store.get(conv.weight).name, "c.weight");
    }
}
