//! 3D U-Net over the context volume with time as depth. Pooling and
//! upsampling act on the spatial axes only, so the four context steps are
//! kept all the way through and folded into channels by the head.

use nowcast_core::{GridSpec, Result};
use nowcast_tensor::ops;
use nowcast_tensor::Var;

use crate::config::{BackboneConfig, Improvement};
use crate::layers::{Act, Conv2d, Conv3d, ConvBlock, ConvTranspose3d, Norm};
use crate::params::{Builder, Ctx};

enum Up {
    Transpose(ConvTranspose3d),
    /// Nearest-neighbour upsampling followed by a 3×3×3 convolution.
    Resample(Conv3d),
}

/// Additive attention gate on a skip connection.
struct AttentionGate {
    wx: Conv3d,
    wg: Conv3d,
    psi: Conv3d,
}

impl AttentionGate {
    fn new(bld: &mut Builder, name: &str, ch: usize) -> Self {
        let mid = (ch / 2).max(1);
        AttentionGate {
            wx: Conv3d::same(bld, &format!("{name}.wx"), ch, mid, [1, 1, 1]),
            wg: Conv3d::same(bld, &format!("{name}.wg"), ch, mid, [1, 1, 1]),
            psi: Conv3d::same(bld, &format!("{name}.psi"), mid, 1, [1, 1, 1]),
        }
    }

    fn forward(&self, ctx: &Ctx, skip: &Var, gate: &Var) -> Var {
        let a = ops::relu(&ops::add(&self.wx.forward(ctx, skip), &self.wg.forward(ctx, gate)));
        let s = ops::sigmoid(&self.psi.forward(ctx, &a));
        ops::mul(skip, &s)
    }
}

pub struct Baseline {
    enc: Vec<ConvBlock>,
    ups: Vec<Up>,
    gates: Vec<Option<AttentionGate>>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
    side: usize,
    padded_side: usize,
    in_steps: usize,
}

impl Baseline {
    pub fn new(bld: &mut Builder, cfg: &BackboneConfig, grid: &GridSpec) -> Result<Self> {
        let levels = cfg.depths.len();
        let norm = if cfg.has(Improvement::InstanceNorm) { Norm::Instance } else { Norm::Batch };
        let act = if cfg.has(Improvement::Rrelu) { Act::Rrelu } else { Act::Relu };
        let ch: Vec<usize> = (0..levels).map(|l| cfg.embed_dim << l).collect();
        let mut enc = Vec::new();
        for l in 0..levels {
            let cin = if l == 0 { grid.in_bands } else { ch[l - 1] };
            enc.push(ConvBlock::new(bld, &format!("enc{l}"), cin, ch[l], cfg.depths[l], [3, 3, 3], norm, act));
        }
        let (mut ups, mut gates, mut dec) = (Vec::new(), Vec::new(), Vec::new());
        for l in (0..levels - 1).rev() {
            ups.push(if cfg.has(Improvement::UpsampleConv) {
                Up::Resample(Conv3d::same(bld, &format!("up{l}.conv"), ch[l + 1], ch[l], [3, 3, 3]))
            } else {
                Up::Transpose(ConvTranspose3d::new(bld, &format!("up{l}.convT"), ch[l + 1], ch[l], [1, 2, 2]))
            });
            gates.push(cfg.has(Improvement::AttentionGrid).then(|| AttentionGate::new(bld, &format!("gate{l}"), ch[l])));
            dec.push(ConvBlock::new(bld, &format!("dec{l}"), 2 * ch[l], ch[l], cfg.depths[l], [3, 3, 3], norm, act));
        }
        let head = Conv2d::new(bld, "head", ch[0] * grid.in_steps, grid.out_steps, 1, 1, 0);
        let m = 1usize << (levels - 1);
        Ok(Baseline {
            enc,
            ups,
            gates,
            dec,
            head,
            side: grid.side,
            padded_side: grid.side.div_ceil(m) * m,
            in_steps: grid.in_steps,
        })
    }

    /// `(B, bands, steps, S, S)` to logits `(B, out_steps, S, S)`.
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let b = x.dim(0);
        let extra = self.padded_side - self.side;
        let mut h = ops::pad(x, &[(0, 0), (0, 0), (0, 0), (0, extra), (0, extra)]);
        let mut skips = Vec::new();
        for (l, block) in self.enc.iter().enumerate() {
            if l > 0 {
                h = ops::max_pool3d(&h, [1, 2, 2]);
            }
            h = block.forward(ctx, &h);
            skips.push(h.clone());
        }
        skips.pop();
        for ((up, gate), block) in self.ups.iter().zip(&self.gates).zip(&self.dec) {
            let u = match up {
                Up::Transpose(t) => t.forward(ctx, &h),
                Up::Resample(c) => c.forward(ctx, &ops::upsample_nearest3d(&h, [1, 2, 2])),
            };
            let skip = skips.pop().expect("one skip per decoder level");
            let skip = match gate {
                Some(g) => g.forward(ctx, &skip, &u),
                None => skip,
            };
            h = block.forward(ctx, &ops::cat(&[skip, u], 1));
        }
        if extra > 0 {
            h = ops::narrow(&ops::narrow(&h, 3, 0, self.side), 4, 0, self.side);
        }
        let c = h.dim(1);
        let h = ops::reshape(&h, &[b, c * self.in_steps, self.side, self.side]);
        self.head.forward(ctx, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Network;
    use nowcast_core::data::{ContextTensor, SampleMeta};

    fn small_grid(side: usize) -> GridSpec {
        GridSpec { in_bands: 3, in_steps: 4, out_steps: 8, side, sat_patch_side: side / 2, resolution_ratio: 2, step_minutes: 15 }
    }

    fn context(g: &GridSpec, seed: u32) -> ContextTensor {
        let v = (0..g.context_len()).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 1000.0).collect();
        ContextTensor::new(v, g, SampleMeta::new("r", 2020, "t")).unwrap()
    }

    fn small(improvements: &[Improvement]) -> BackboneConfig {
        BackboneConfig { embed_dim: 4, improvements: improvements.iter().copied().collect(), ..BackboneConfig::baseline() }
    }

    #[test]
    fn desk_forward_shape_and_range() {
        let g = GridSpec::desk();
        let net = Network::new(BackboneConfig { embed_dim: 4, ..BackboneConfig::baseline() }, g, 1).unwrap();
        let out = net.predict(&context(&g, 1)).unwrap();
        assert_eq!(out.probs.shape(), [32, 64, 64]);
        assert!(out.probs.values().iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(out.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn side_not_divisible_by_the_pooling_is_padded_and_cropped() {
        let g = small_grid(10);
        let net = Network::new(small(&Improvement::ALL), g, 2).unwrap();
        assert_eq!(net.predict(&context(&g, 2)).unwrap().probs.shape(), [8, 10, 10]);
    }

    #[test]
    fn upsample_conv_has_no_transpose_parameters() {
        let g = small_grid(8);
        let plain = Network::new(small(&[]), g, 0).unwrap();
        assert!(plain.params.names().any(|n| n.contains("convT")));
        let up = Network::new(small(&[Improvement::UpsampleConv]), g, 0).unwrap();
        assert!(!up.params.names().any(|n| n.contains("convT")));
    }

    #[test]
    fn attention_grid_adds_gates() {
        let g = small_grid(8);
        let plain = Network::new(small(&[]), g, 0).unwrap();
        assert!(!plain.params.names().any(|n| n.starts_with("gate")));
        let gated = Network::new(small(&[Improvement::AttentionGrid]), g, 0).unwrap();
        // two decoder levels, three 1×1 convolutions with bias each
        assert_eq!(gated.params.names().filter(|n| n.starts_with("gate")).count(), 12);
        // gate channels are half the skip channels
        assert_eq!(gated.params.get("gate0.wx.weight").unwrap().shape, vec![2, 4, 1, 1, 1]);
    }

    #[test]
    fn relu_and_rrelu_agree_on_zero_pre_activations() {
        let g = small_grid(8);
        let outputs: Vec<Vec<f32>> = [vec![], vec![Improvement::Rrelu]]
            .iter()
            .map(|imp| {
                let mut net = Network::new(small(imp), g, 3).unwrap();
                for (name, p) in net.params.iter_mut() {
                    if !name.starts_with("head") {
                        p.data.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                net.predict(&context(&g, 3)).unwrap().logits
            })
            .collect();
        assert_eq!(outputs[0], outputs[1]);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let g = small_grid(8);
        let net = Network::new(small(&Improvement::ALL), g, 4).unwrap();
        let c = context(&g, 4);
        assert_eq!(net.predict(&c).unwrap().logits, net.predict(&c).unwrap().logits);
    }
}
