//! Factorized video transformer: a spatial transformer per frame, then a
//! temporal transformer over the per-frame class tokens. The final class
//! token is read as a `√D × √D` map, upscaled bilinearly and turned into
//! the output steps by one convolution.

use nowcast_core::{GridSpec, Result};
use nowcast_tensor::ops;
use nowcast_tensor::Var;

use crate::attention_core::TransformerBlock;
use crate::config::BackboneConfig;
use crate::layers::{Conv2d, LayerNorm};
use crate::params::{Builder, Ctx, Init};

pub struct Vivit {
    patch: usize,
    dim: usize,
    patch_embed: Conv2d,
    cls: String,
    pos: String,
    spatial: Vec<TransformerBlock>,
    spatial_norm: LayerNorm,
    temporal_cls: String,
    temporal_pos: String,
    temporal: Vec<TransformerBlock>,
    temporal_norm: LayerNorm,
    head: Conv2d,
    side: usize,
    padded_side: usize,
    token_side: usize,
}

impl Vivit {
    pub fn new(bld: &mut Builder, cfg: &BackboneConfig, grid: &GridSpec) -> Result<Self> {
        let d = cfg.token_dim;
        let p = cfg.patch_size[1].max(1);
        let padded_side = grid.side.div_ceil(p) * p;
        let n = (padded_side / p) * (padded_side / p);
        let heads = cfg.heads[0];
        let spatial = (0..cfg.depths[0])
            .map(|i| TransformerBlock::new(bld, &format!("spatial{i}"), d, heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let temporal = (0..cfg.depths[1])
            .map(|i| TransformerBlock::new(bld, &format!("temporal{i}"), d, heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Vivit {
            patch: p,
            dim: d,
            patch_embed: Conv2d::new(bld, "patch_embed", grid.in_bands, d, p, p, 0),
            cls: bld.add("cls_token", &[1, 1, d], Init::TruncNormal(0.02)),
            pos: bld.add("pos_embed", &[n + 1, d], Init::TruncNormal(0.02)),
            spatial,
            spatial_norm: LayerNorm::new(bld, "spatial_norm", d),
            temporal_cls: bld.add("temporal_cls_token", &[1, 1, d], Init::TruncNormal(0.02)),
            temporal_pos: bld.add("temporal_pos_embed", &[grid.in_steps + 1, d], Init::TruncNormal(0.02)),
            temporal,
            temporal_norm: LayerNorm::new(bld, "temporal_norm", d),
            head: Conv2d::new(bld, "head", 1, grid.out_steps, 3, 1, 1),
            side: grid.side,
            padded_side,
            token_side: cfg.token_side(),
        })
    }

    /// Prepends a learned token to every sequence of `x` `(B, N, D)`.
    fn with_cls(&self, ctx: &Ctx, x: &Var, cls: &str) -> Var {
        let b = x.dim(0);
        let tok = ops::add(&Var::zeros(&[b, 1, self.dim]), &ctx.p(cls));
        ops::cat(&[tok, x.clone()], 1)
    }

    /// The final class token `(B, D)`.
    pub fn encode(&self, ctx: &Ctx, x: &Var) -> Var {
        let s = x.shape().to_vec();
        let (b, bands, t) = (s[0], s[1], s[2]);
        let extra = self.padded_side - self.side;
        // fold time into the batch axis: (B·T, bands, S, S)
        let frames = ops::reshape(&ops::permute(x, &[0, 2, 1, 3, 4]), &[b * t, bands, s[3], s[4]]);
        let frames = ops::pad(&frames, &[(0, 0), (0, 0), (0, extra), (0, extra)]);
        let e = self.patch_embed.forward(ctx, &frames);
        let n = e.dim(2) * e.dim(3);
        let tokens = ops::permute(&ops::reshape(&e, &[b * t, self.dim, n]), &[0, 2, 1]);
        let mut h = ops::add(&self.with_cls(ctx, &tokens, &self.cls), &ctx.p(&self.pos));
        for blk in &self.spatial {
            h = blk.forward(ctx, &h);
        }
        let h = self.spatial_norm.forward(ctx, &h);
        let frame_cls = ops::reshape(&ops::narrow(&h, 1, 0, 1), &[b, t, self.dim]);
        let mut z = ops::add(&self.with_cls(ctx, &frame_cls, &self.temporal_cls), &ctx.p(&self.temporal_pos));
        for blk in &self.temporal {
            z = blk.forward(ctx, &z);
        }
        let z = self.temporal_norm.forward(ctx, &z);
        ops::reshape(&ops::narrow(&z, 1, 0, 1), &[b, self.dim])
    }

    /// Class token `(B, D)` to the upscaled single-channel map `(B, 1, S, S)`.
    pub fn upscale(&self, token: &Var) -> Var {
        let b = token.dim(0);
        let r = self.token_side;
        ops::resize_bilinear(&ops::reshape(token, &[b, 1, r, r]), self.side, self.side)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        self.head.forward(ctx, &self.upscale(&self.encode(ctx, x)))
    }

    pub fn patch(&self) -> usize {
        self.patch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Network;
    use nowcast_core::data::{ContextTensor, SampleMeta};

    fn context(g: &GridSpec, seed: u32) -> ContextTensor {
        let v = (0..g.context_len()).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) % 997).map(|v| v as f32 / 997.0).collect();
        ContextTensor::new(v, g, SampleMeta::new("r", 2020, "t")).unwrap()
    }

    fn arch(net: &Network) -> &Vivit {
        match &net.arch {
            crate::network::Arch::Vivit(v) => v,
            _ => unreachable!(),
        }
    }

    #[test]
    fn desk_forward_shape() {
        let g = GridSpec::desk();
        let net = Network::new(BackboneConfig::vivit(), g, 1).unwrap();
        let out = net.predict(&context(&g, 1)).unwrap();
        assert_eq!(out.probs.shape(), [32, 64, 64]);
        assert!(out.probs.values().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn batched_equals_separate() {
        let g = GridSpec::desk();
        let net = Network::new(BackboneConfig::vivit(), g, 2).unwrap();
        let (a, b) = (context(&g, 5), context(&g, 9));
        let joint = net.predict_batch(&[&a, &b]).unwrap();
        for (j, c) in joint.iter().zip([&a, &b]) {
            let alone = net.predict(c).unwrap();
            for (x, y) in j.logits.iter().zip(&alone.logits) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn constant_token_upscales_to_a_constant_map() {
        let g = GridSpec::desk();
        let net = Network::new(BackboneConfig::vivit(), g, 0).unwrap();
        let map = arch(&net).upscale(&Var::full(0.75, &[1, 64]));
        assert_eq!(map.shape(), &[1, 1, 64, 64]);
        assert!(map.data().iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn side_not_divisible_by_the_patch_is_padded() {
        let g = GridSpec { side: 20, sat_patch_side: 10, resolution_ratio: 2, ..GridSpec::desk() };
        let cfg = BackboneConfig { token_dim: 16, heads: vec![2], ..BackboneConfig::vivit() };
        let net = Network::new(cfg, g, 0).unwrap();
        assert_eq!(net.predict(&context(&g, 0)).unwrap().probs.shape(), [32, 20, 20]);
    }

    #[test]
    fn non_square_token_dim_is_a_config_error() {
        let cfg = BackboneConfig { token_dim: 48, ..BackboneConfig::vivit() };
        assert!(Network::new(cfg, GridSpec::desk(), 0).err().unwrap().is_config());
    }
}
