use rand::Rng;

use crate::error::Result;
use crate::init;
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::{Array, Graph, Var};

/// Affine map `y = x·Wᵀ + b` over the last axis, Xavier-initialised.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = init::xavier_uniform(rng, vec![out_dim, in_dim], in_dim, out_dim);
        let weight = store.add(format!("{name}.weight"), Group::Main, w);
        let bias = store.add(format!("{name}.bias"), Group::Main, Array::zeros(vec![out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Result<Var<'g>> {
        let w = g.param(store, self.weight).transpose()?;
        let b = g.param(store, self.bias);
        x.matmul(&w)?.add(&b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Group::Main, Array::ones(vec![dim])),
            beta: store.add(format!("{name}.beta"), Group::Main, Array::zeros(vec![dim])),
            eps: 1e-6,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(&g.param(store, self.gamma), &g.param(store, self.beta), self.eps)
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
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
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = init::xavier_uniform(
            rng,
            vec![out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
            out_channels * kernel * kernel,
        );
        Self {
            weight: store.add(format!("{name}.weight"), Group::Main, w),
            bias: store.add(
                format!("{name}.bias"),
                Group::Main,
                Array::zeros(vec![out_channels]),
            ),
            stride,
            padding,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Result<Var<'g>> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        x.conv2d(&w, Some(&b), self.stride, self.padding)
    }
}
