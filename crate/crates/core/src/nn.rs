//! Small building blocks shared by the model components.

use alloc::format;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(fan_in, fan_out, rng));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Matrix::zeros(fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add(xw, b)
    }

    /// Same map with the parameters entering as constants.
    pub fn forward_detached(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param_detached(self.weight);
        let b = g.param_detached(self.bias);
        let xw = g.matmul(x, w);
        g.add(xw, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Matrix::filled(1, width, 1.0));
        let beta = store.add(format!("{name}.beta"), Matrix::zeros(1, width));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}
