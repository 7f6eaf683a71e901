//! Plain convolution layers with parameters kept in a [`ParamStore`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::ConvSpec;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), &[out_channels], fan_in, rng);
        Conv2d { weight, bias, spec }
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * in_channels * kernel * kernel + out_channels
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.spec)
    }
}

/// Kernel 2, stride 2 transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2 {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * 4;
        let weight = store.add_uniform(format!("{name}.weight"), &[in_channels, out_channels, 2, 2], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[out_channels], fan_in, rng);
        ConvTranspose2 { weight, bias }
    }

    pub fn param_count(in_channels: usize, out_channels: usize) -> usize {
        in_channels * out_channels * 4 + out_channels
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        g.conv_transpose2x2(x, p.var(self.weight), p.var(self.bias))
    }
}
