//! Parameterized building blocks shared by the three families.

use nowcast_tensor::ops::{self, Conv3dSpec};
use nowcast_tensor::Var;
use serde::{Deserialize, Serialize};

use crate::params::{Builder, Ctx, Init};

pub const NORM_EPS: f32 = 1e-5;
/// Slope range of the randomized leaky ReLU.
pub const RRELU_RANGE: (f32, f32) = (1.0 / 8.0, 1.0 / 3.0);

pub struct Linear {
    w: String,
    b: Option<String>,
}

impl Linear {
    pub fn new(bld: &mut Builder, name: &str, in_f: usize, out_f: usize, bias: bool) -> Self {
        let w = bld.add(&format!("{name}.weight"), &[out_f, in_f], Init::LecunUniform { fan_in: in_f });
        let b = bias.then(|| bld.add(&format!("{name}.bias"), &[out_f], Init::Zeros));
        Linear { w, b }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let b = self.b.as_ref().map(|n| ctx.p(n));
        ops::linear(x, &ctx.p(&self.w), b.as_ref())
    }
}

pub struct LayerNorm {
    g: String,
    b: String,
}

impl LayerNorm {
    pub fn new(bld: &mut Builder, name: &str, dim: usize) -> Self {
        LayerNorm {
            g: bld.add(&format!("{name}.gamma"), &[dim], Init::Ones),
            b: bld.add(&format!("{name}.beta"), &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        ops::layer_norm(x, &ctx.p(&self.g), &ctx.p(&self.b), NORM_EPS)
    }
}

/// 3D convolution on `(N, C, D, H, W)`.
pub struct Conv3d {
    w: String,
    b: Option<String>,
    spec: Conv3dSpec,
}

impl Conv3d {
    pub fn new(bld: &mut Builder, name: &str, cin: usize, cout: usize, k: [usize; 3], spec: Conv3dSpec, bias: bool) -> Self {
        let fan_in = cin * k.iter().product::<usize>();
        let w = bld.add(&format!("{name}.weight"), &[cout, cin, k[0], k[1], k[2]], Init::HeUniform { fan_in });
        let b = bias.then(|| bld.add(&format!("{name}.bias"), &[cout], Init::Zeros));
        Conv3d { w, b, spec }
    }

    /// Stride-1 convolution that keeps the volume size.
    pub fn same(bld: &mut Builder, name: &str, cin: usize, cout: usize, k: [usize; 3]) -> Self {
        Self::new(bld, name, cin, cout, k, Conv3dSpec::same(k), true)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let w = ctx.p(&self.w);
        let y = ops::conv3d(x, &w, None, self.spec);
        match &self.b {
            Some(b) => add_channel_bias(&y, &ctx.p(b)),
            None => y,
        }
    }
}

/// Adds a per-channel bias to `(N, C, ...)`.
pub fn add_channel_bias(x: &Var, b: &Var) -> Var {
    let mut shape = vec![1; x.rank()];
    shape[1] = b.numel();
    ops::add(x, &ops::reshape(b, &shape))
}

/// 2D convolution on `(N, C, H, W)`.
pub struct Conv2d {
    w: String,
    b: Option<String>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(bld: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        let w = bld.add(&format!("{name}.weight"), &[cout, cin, k, k], Init::HeUniform { fan_in: cin * k * k });
        let b = Some(bld.add(&format!("{name}.bias"), &[cout], Init::Zeros));
        Conv2d { w, b, stride, padding }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let y = ops::conv2d(x, &ctx.p(&self.w), None, [self.stride; 2], [self.padding; 2]);
        match &self.b {
            Some(b) => add_channel_bias(&y, &ctx.p(b)),
            None => y,
        }
    }
}

/// Transposed 3D convolution with kernel equal to stride.
pub struct ConvTranspose3d {
    w: String,
    b: String,
}

impl ConvTranspose3d {
    pub fn new(bld: &mut Builder, name: &str, cin: usize, cout: usize, k: [usize; 3]) -> Self {
        let w = bld.add(&format!("{name}.weight"), &[cin, cout, k[0], k[1], k[2]], Init::HeUniform { fan_in: cin });
        let b = bld.add(&format!("{name}.bias"), &[cout], Init::Zeros);
        ConvTranspose3d { w, b }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        add_channel_bias(&ops::conv_transpose3d(x, &ctx.p(&self.w), None), &ctx.p(&self.b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    Relu,
    /// Randomized slopes in training, mean slope in evaluation.
    Rrelu,
    LeakyRelu,
    Gelu,
}

impl Act {
    pub fn apply(self, ctx: &Ctx, x: &Var) -> Var {
        match self {
            Act::Relu => ops::relu(x),
            Act::LeakyRelu => ops::leaky_relu(x, 0.01),
            Act::Gelu => ops::gelu(x),
            Act::Rrelu => ctx.with_rng(|rng| ops::rrelu(x, RRELU_RANGE.0, RRELU_RANGE.1, rng)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// Batch statistics, no affine.
    Batch,
    Instance,
}

impl Norm {
    pub fn apply(self, x: &Var) -> Var {
        match self {
            Norm::Batch => ops::batch_norm(x, NORM_EPS),
            Norm::Instance => ops::instance_norm(x, NORM_EPS),
        }
    }
}

/// `n` rounds of 3×3×3 (or the given kernel) convolution, normalization,
/// activation.
pub struct ConvBlock {
    convs: Vec<Conv3d>,
    norm: Norm,
    act: Act,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(bld: &mut Builder, name: &str, cin: usize, cout: usize, n: usize, k: [usize; 3], norm: Norm, act: Act) -> Self {
        let convs = (0..n)
            .map(|i| Conv3d::same(bld, &format!("{name}.conv{i}"), if i == 0 { cin } else { cout }, cout, k))
            .collect();
        ConvBlock { convs, norm, act }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let mut y = x.clone();
        for c in &self.convs {
            y = self.act.apply(ctx, &self.norm.apply(&c.forward(ctx, &y)));
        }
        y
    }
}

/// Two-layer perceptron with GELU.
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(bld: &mut Builder, name: &str, dim: usize, hidden: usize) -> Self {
        Mlp { fc1: Linear::new(bld, &format!("{name}.fc1"), dim, hidden, true), fc2: Linear::new(bld, &format!("{name}.fc2"), hidden, dim, true) }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        self.fc2.forward(ctx, &ops::gelu(&self.fc1.forward(ctx, x)))
    }
}

/// `(N, C, D, H, W)` to channels-last `(N, D, H, W, C)`.
pub fn to_channels_last(x: &Var) -> Var {
    ops::permute(x, &[0, 2, 3, 4, 1])
}

pub fn to_channels_first(x: &Var) -> Var {
    ops::permute(x, &[0, 4, 1, 2, 3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rrelu_is_deterministic_in_eval() {
        let store = Builder::new(0).finish();
        let ctx = Ctx::eval(&store);
        let x = Var::constant(vec![-1.0, 2.0], &[2]);
        let a = Act::Rrelu.apply(&ctx, &x);
        let b = Act::Rrelu.apply(&ctx, &x);
        assert_eq!(a.data(), b.data());
        let mid = 0.5 * (RRELU_RANGE.0 + RRELU_RANGE.1);
        assert!((a.data()[0] + mid).abs() < 1e-7);
        assert_eq!(a.data()[1], 2.0);
    }

    #[test]
    fn conv_bias_broadcasts_per_channel() {
        let mut bld = Builder::new(0);
        let c = Conv3d::same(&mut bld, "c", 1, 2, [1, 1, 1]);
        let mut store = bld.finish();
        store.get_mut("c.weight").unwrap().data = vec![0.0, 0.0];
        store.get_mut("c.bias").unwrap().data = vec![1.0, -1.0];
        let ctx = Ctx::eval(&store);
        let y = c.forward(&ctx, &Var::zeros(&[1, 1, 1, 2, 2]));
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
    }
}
