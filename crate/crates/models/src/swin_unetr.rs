//! Shifted-window encoder with a convolutional U-shaped decoder. Bands are
//! channels and time is the depth axis of the 3D volume.

use nowcast_core::{Error, GridSpec, Result};
use nowcast_tensor::ops;
use nowcast_tensor::Var;

use crate::attention_core::{PatchEmbed, PatchMerging, SwinBlock, WindowConfig};
use crate::config::{Adapter, BackboneConfig};
use crate::layers::{to_channels_first, Act, Conv2d, Conv3d, ConvBlock, ConvTranspose3d, Norm};
use crate::params::{Builder, Ctx};

/// Resizes `(B, bands, T, S, S)` to `interp` and repeats every time step
/// `times` times along the depth axis.
pub fn adapt_repeat_interleave(x: &Var, interp: usize, times: usize) -> Var {
    ops::repeat_interleave(&ops::resize_bilinear(x, interp, interp), 2, times)
}

/// Two 3×3 convolutions per band taking the time steps to `out_steps`
/// channels, each followed by RReLU and instance normalization.
pub struct ChannelConv {
    conv1: Conv2d,
    conv2: Conv2d,
    interp: usize,
}

impl ChannelConv {
    pub fn new(bld: &mut Builder, name: &str, in_steps: usize, out_steps: usize, interp: usize) -> Self {
        ChannelConv {
            conv1: Conv2d::new(bld, &format!("{name}.conv1"), in_steps, out_steps, 3, 1, 1),
            conv2: Conv2d::new(bld, &format!("{name}.conv2"), out_steps, out_steps, 3, 1, 1),
            interp,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let s = x.shape().to_vec();
        let (b, bands, t) = (s[0], s[1], s[2]);
        let i = self.interp;
        let r = ops::reshape(&ops::resize_bilinear(x, i, i), &[b * bands, t, i, i]);
        let step = |conv: &Conv2d, v: &Var| ops::instance_norm(&Act::Rrelu.apply(ctx, &conv.forward(ctx, v)), 1e-5);
        let y = step(&self.conv2, &step(&self.conv1, &r));
        let out = y.dim(1);
        ops::reshape(&y, &[b, bands, out, i, i])
    }
}

struct Stage {
    blocks: Vec<SwinBlock>,
    merge: PatchMerging,
}

struct DecoderLevel {
    up: ConvTranspose3d,
    block: ConvBlock,
}

pub struct SwinUnetr {
    adapter: Adapter,
    channel_conv: Option<ChannelConv>,
    interp: usize,
    side: usize,
    repeat: usize,
    embed: PatchEmbed,
    stages: Vec<Stage>,
    decoder: Vec<DecoderLevel>,
    final_up: ConvTranspose3d,
    input_skip: Conv3d,
    final_block: ConvBlock,
    depth_ups: Vec<ConvTranspose3d>,
    out: Conv3d,
    grids: Vec<[usize; 3]>,
}

fn decoder_block(bld: &mut Builder, name: &str, cin: usize, cout: usize) -> ConvBlock {
    ConvBlock::new(bld, name, cin, cout, 1, [3, 3, 3], Norm::Instance, Act::LeakyRelu)
}

impl SwinUnetr {
    pub fn new(bld: &mut Builder, cfg: &BackboneConfig, grid: &GridSpec) -> Result<Self> {
        let adapter = cfg.adapter.ok_or_else(|| Error::config("swin_unetr needs an adapter"))?;
        let interp = cfg.interp_side;
        let upsample = adapter == Adapter::UpsampleDecoder;
        if grid.out_steps % grid.in_steps != 0 {
            return Err(Error::config(format!(
                "output steps {} are not a multiple of input steps {}",
                grid.out_steps, grid.in_steps
            )));
        }
        let repeat = grid.out_steps / grid.in_steps;
        let depth_in = if upsample { grid.in_steps } else { grid.out_steps };
        let mut patch = cfg.patch_size;
        if upsample {
            patch[0] = 1;
        }
        let input = [depth_in, interp, interp];
        if (0..3).any(|a| input[a] % patch[a] != 0) {
            return Err(Error::config(format!("adapted input {:?} is not divisible by patch size {:?}", input, patch)));
        }
        let n_stages = cfg.depths.len();
        let mut grids = vec![[input[0] / patch[0], input[1] / patch[1], input[2] / patch[2]]];
        let mut chans = vec![cfg.embed_dim];
        let mut stages = Vec::new();
        for s in 0..n_stages {
            let (g, c) = (grids[s], chans[s]);
            let merge_depth = !upsample && g[0] >= 2 && g[0] % 2 == 0;
            let next = PatchMerging::output_dims(g, merge_depth).map_err(|e| Error::config(e.to_string()))?;
            let out_c = if upsample && s + 2 >= n_stages { c } else { 2 * c };
            let mut blocks = Vec::new();
            for j in 0..cfg.depths[s] {
                let shift = if j % 2 == 1 { cfg.window.map(|w| w / 2) } else { [0; 3] };
                let wc = WindowConfig::new(cfg.window, shift)?;
                blocks.push(SwinBlock::new(bld, &format!("stage{s}.block{j}"), c, cfg.heads[s], wc, g, cfg.mlp_ratio)?);
            }
            let merge = PatchMerging::new(bld, &format!("stage{s}.merge"), c, out_c, merge_depth);
            stages.push(Stage { blocks, merge });
            grids.push(next);
            chans.push(out_c);
        }
        let mut decoder = Vec::new();
        for s in (0..n_stages).rev() {
            let k = [0, 1, 2].map(|a| grids[s][a] / grids[s + 1][a]);
            decoder.push(DecoderLevel {
                up: ConvTranspose3d::new(bld, &format!("dec{s}.up"), chans[s + 1], chans[s], k),
                block: decoder_block(bld, &format!("dec{s}.block"), 2 * chans[s], chans[s]),
            });
        }
        let f = cfg.decoder_channels;
        let final_up = ConvTranspose3d::new(bld, "final.up", chans[0], f, patch);
        let input_skip = Conv3d::same(bld, "final.input_skip", grid.in_bands, f, [1, 1, 1]);
        let final_block = decoder_block(bld, "final.block", 2 * f, f);
        let mut depth_ups = Vec::new();
        let (mut depth, mut width) = (depth_in, f);
        while depth < grid.out_steps {
            let next = (width / 2).max(1);
            depth_ups.push(ConvTranspose3d::new(bld, &format!("depth_up{}", depth_ups.len()), width, next, [2, 1, 1]));
            depth *= 2;
            width = next;
        }
        if depth != grid.out_steps {
            return Err(Error::config(format!(
                "upsample decoder doubles depth {} but {} output steps are not reachable",
                depth_in, grid.out_steps
            )));
        }
        let out = Conv3d::same(bld, "out", width, 1, [1, 1, 1]);
        let channel_conv =
            (adapter == Adapter::ChannelConv).then(|| ChannelConv::new(bld, "adapter", grid.in_steps, grid.out_steps, interp));
        Ok(SwinUnetr {
            adapter,
            channel_conv,
            interp,
            side: grid.side,
            repeat,
            embed: PatchEmbed::new(bld, "patch_embed", grid.in_bands, cfg.embed_dim, patch),
            stages,
            decoder,
            final_up,
            input_skip,
            final_block,
            depth_ups,
            out,
            grids,
        })
    }

    /// Token grid sizes from the patch embedding down to the bottleneck.
    pub fn grids(&self) -> &[[usize; 3]] {
        &self.grids
    }

    /// `(B, bands, T, S, S)` to the encoder input `(B, bands, depth, I, I)`.
    pub fn adapt(&self, ctx: &Ctx, x: &Var) -> Var {
        match self.adapter {
            Adapter::RepeatInterleave => adapt_repeat_interleave(x, self.interp, self.repeat),
            Adapter::ChannelConv => self.channel_conv.as_ref().expect("built with the adapter").forward(ctx, x),
            Adapter::UpsampleDecoder => ops::resize_bilinear(x, self.interp, self.interp),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let b = x.dim(0);
        let a = self.adapt(ctx, x);
        let mut t = self.embed.forward(ctx, &a)?;
        let mut skips = Vec::new();
        for st in &self.stages {
            for blk in &st.blocks {
                t = blk.forward(ctx, &t);
            }
            skips.push(to_channels_first(&t));
            t = st.merge.forward(ctx, &t)?;
        }
        let mut y = to_channels_first(&t);
        for lvl in &self.decoder {
            let skip = skips.pop().expect("one skip per stage");
            let u = lvl.up.forward(ctx, &y);
            y = lvl.block.forward(ctx, &ops::cat(&[skip, u], 1));
        }
        let u = self.final_up.forward(ctx, &y);
        y = self.final_block.forward(ctx, &ops::cat(&[self.input_skip.forward(ctx, &a), u], 1));
        for up in &self.depth_ups {
            y = up.forward(ctx, &y);
        }
        let y = self.out.forward(ctx, &y);
        let (d, i) = (y.dim(2), self.interp);
        let y = ops::reshape(&y, &[b, d, i, i]);
        Ok(ops::resize_bilinear(&y, self.side, self.side))
    }
}
