//! Parameterized layers on top of the autograd tape.

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal: std = sqrt(2 / fan_in).
    He,
    Normal(f64),
    Zeros,
}

fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let std = match init {
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Normal(s) => s,
        Init::Zeros => return Tensor::zeros(shape),
    };
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// Whether a layer's parameters receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grad {
    Track,
    Freeze,
}

fn bind(g: &mut Graph, store: &ParamStore, id: ParamId, grad: Grad) -> Var {
    match grad {
        Grad::Track => g.param(store, id),
        Grad::Freeze => g.frozen_param(store, id),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = init_tensor(&[out_features, in_features], in_features, init, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, grad: Grad) -> Var {
        let w = bind(g, store, self.weight, grad);
        let b = bind(g, store, self.bias, grad);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = init_tensor(&[out_channels, in_channels, kernel, kernel], fan_in, init, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, grad: Grad) -> Var {
        let w = bind(g, store, self.weight, grad);
        let b = bind(g, store, self.bias, grad);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}
