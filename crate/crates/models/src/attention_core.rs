//! Transformer mechanics shared by the ViViT and Swin-UNETR families:
//! patch embedding, multi-head self-attention, 3D window partitioning with
//! cyclic shifts, and patch merging.
//!
//! Token grids are channels-last `(B, D, H, W, C)` arrays.

use std::rc::Rc;

use nowcast_core::{Error, Result};
use nowcast_tensor::ops::{self, Conv3dSpec, ZERO_INDEX};
use nowcast_tensor::Var;
use serde::{Deserialize, Serialize};

use crate::layers::{to_channels_last, Conv3d, LayerNorm, Linear, Mlp};
use crate::params::{Builder, Ctx, Init};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowConfig {
    pub fn new(window: [usize; 3], shift: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if window[a] == 0 {
                return Err(Error::config(format!("window size must be positive, got {:?}", window)));
            }
            if shift[a] >= window[a] {
                return Err(Error::config(format!("shift {:?} must be smaller than window {:?}", shift, window)));
            }
        }
        Ok(WindowConfig { window, shift })
    }

    /// Shrinks the window to axes smaller than it and drops the shift there,
    /// so a single window covers the whole axis.
    pub fn fit(&self, dims: [usize; 3]) -> Self {
        let mut out = *self;
        for a in 0..3 {
            if dims[a] <= self.window[a] {
                out.window[a] = dims[a];
                out.shift[a] = 0;
            }
        }
        out
    }

    pub fn volume(&self) -> usize {
        self.window.iter().product()
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }
}

fn padded_dims(dims: [usize; 3], window: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| dims[a].div_ceil(window[a]) * window[a])
}

fn grid_dims(x: &Var) -> (usize, [usize; 3], usize) {
    assert_eq!(x.rank(), 5, "token grid must be (B, D, H, W, C), got {:?}", x.shape());
    let s = x.shape();
    (s[0], [s[1], s[2], s[3]], s[4])
}

/// Geometry needed to undo a [`window_partition`].
#[derive(Clone, Debug, PartialEq)]
pub struct WindowLayout {
    pub batch: usize,
    pub dims: [usize; 3],
    pub padded: [usize; 3],
    pub window: [usize; 3],
    pub channels: usize,
}

impl WindowLayout {
    /// Windows per sample.
    pub fn num_windows(&self) -> usize {
        (0..3).map(|a| self.padded[a] / self.window[a]).product()
    }

    pub fn window_volume(&self) -> usize {
        self.window.iter().product()
    }

    /// Whether each (window, position) slot holds a real token rather than
    /// padding, laid out `(num_windows, window_volume)`.
    pub fn valid(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_windows() * self.window_volume());
        self.for_each_slot(|d, h, w| out.push(d < self.dims[0] && h < self.dims[1] && w < self.dims[2]));
        out
    }

    /// Visits padded-grid coordinates in window order.
    fn for_each_slot(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [wd, wh, ww] = self.window;
        let [nd, nh, nw] = [0, 1, 2].map(|a| self.padded[a] / self.window[a]);
        for bd in 0..nd {
            for bh in 0..nh {
                for bw in 0..nw {
                    for z in 0..wd {
                        for y in 0..wh {
                            for x in 0..ww {
                                f(bd * wd + z, bh * wh + y, bw * ww + x);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits a token grid into non-overlapping windows, zero padding each axis
/// up to a multiple of the window. Output `(B · num_windows, volume, C)`.
pub fn window_partition(x: &Var, window: [usize; 3]) -> (Var, WindowLayout) {
    let (batch, dims, c) = grid_dims(x);
    let layout = WindowLayout { batch, dims, padded: padded_dims(dims, window), window, channels: c };
    let per_sample = dims.iter().product::<usize>() * c;
    let mut slots = Vec::with_capacity(layout.num_windows() * layout.window_volume());
    layout.for_each_slot(|d, h, w| {
        slots.push((d < dims[0] && h < dims[1] && w < dims[2]).then(|| ((d * dims[1] + h) * dims[2] + w) * c));
    });
    let mut index = Vec::with_capacity(batch * slots.len() * c);
    for b in 0..batch {
        for s in &slots {
            match s {
                Some(off) => index.extend((0..c).map(|k| (b * per_sample + off + k) as u32)),
                None => index.extend(std::iter::repeat_n(ZERO_INDEX, c)),
            }
        }
    }
    let shape = [batch * layout.num_windows(), layout.window_volume(), c];
    (ops::gather(x, Rc::new(index), &shape), layout)
}

/// Inverse of [`window_partition`]; padding is dropped.
pub fn window_reverse(windows: &Var, layout: &WindowLayout) -> Var {
    let c = layout.channels;
    let dims = layout.dims;
    let plane = dims.iter().product::<usize>();
    let mut slot_of = vec![0u32; plane];
    let mut n = 0u32;
    layout.for_each_slot(|d, h, w| {
        if d < dims[0] && h < dims[1] && w < dims[2] {
            slot_of[(d * dims[1] + h) * dims[2] + w] = n;
        }
        n += 1;
    });
    let per_sample = layout.num_windows() * layout.window_volume();
    let mut index = Vec::with_capacity(layout.batch * plane * c);
    for b in 0..layout.batch {
        for &s in &slot_of {
            let base = (b * per_sample + s as usize) * c;
            index.extend((base..base + c).map(|v| v as u32));
        }
    }
    ops::gather(windows, Rc::new(index), &[layout.batch, dims[0], dims[1], dims[2], c])
}

/// Rolls the three grid axes by `-shift`.
pub fn cyclic_shift(x: &Var, shift: [usize; 3]) -> Var {
    ops::roll(x, &[(1, -(shift[0] as isize)), (2, -(shift[1] as isize)), (3, -(shift[2] as isize))])
}

pub fn reverse_cyclic_shift(x: &Var, shift: [usize; 3]) -> Var {
    ops::roll(x, &[(1, shift[0] as isize), (2, shift[1] as isize), (3, shift[2] as isize)])
}

/// Additive attention bias `(num_windows, volume, volume)` for a grid of
/// `dims` padded to `padded`, after a cyclic shift by `cfg.shift`. Keys that
/// are padding, or that wrapped around from a different region, get −∞.
/// `None` when nothing needs masking.
pub fn window_attention_mask(dims: [usize; 3], cfg: &WindowConfig) -> Option<Vec<f32>> {
    let padded = padded_dims(dims, cfg.window);
    if padded == dims && !cfg.is_shifted() {
        return None;
    }
    let layout = WindowLayout { batch: 1, dims: padded, padded, window: cfg.window, channels: 1 };
    let region = |a: usize, i: usize| -> usize {
        let (p, w, s) = (padded[a], cfg.window[a], cfg.shift[a]);
        if s == 0 || i < p - w {
            0
        } else if i < p - s {
            1
        } else {
            2
        }
    };
    // token at shifted position i came from i + shift (mod padded)
    let mut labels = Vec::new();
    layout.for_each_slot(|d, h, w| {
        let src = [d, h, w];
        let orig = [0, 1, 2].map(|a| (src[a] + cfg.shift[a]) % padded[a]);
        let valid = orig[0] < dims[0] && orig[1] < dims[1] && orig[2] < dims[2];
        let label = (region(0, src[0]) * 3 + region(1, src[1])) * 3 + region(2, src[2]);
        labels.push((valid, label));
    });
    let v = cfg.volume();
    let mut mask = vec![0.0f32; labels.len() * v];
    for (wi, win) in labels.chunks(v).enumerate() {
        for (i, &(_, li)) in win.iter().enumerate() {
            for (j, &(vj, lj)) in win.iter().enumerate() {
                if !vj || li != lj {
                    mask[(wi * v + i) * v + j] = f32::NEG_INFINITY;
                }
            }
        }
    }
    Some(mask)
}

/// Index into a `(2w_d-1)(2w_h-1)(2w_w-1)`-row bias table for every
/// (query, key) pair of a window, row-major `(volume, volume)`.
pub fn relative_position_index(window: [usize; 3]) -> Vec<usize> {
    let [wd, wh, ww] = window;
    let coords: Vec<[usize; 3]> =
        (0..wd).flat_map(|z| (0..wh).flat_map(move |y| (0..ww).map(move |x| [z, y, x]))).collect();
    let (sh, sw) = (2 * wh - 1, 2 * ww - 1);
    let mut out = Vec::with_capacity(coords.len() * coords.len());
    for a in &coords {
        for b in &coords {
            let dz = a[0] + wd - 1 - b[0];
            let dy = a[1] + wh - 1 - b[1];
            let dx = a[2] + ww - 1 - b[2];
            out.push((dz * sh + dy) * sw + dx);
        }
    }
    out
}

pub fn relative_table_len(window: [usize; 3]) -> usize {
    window.iter().map(|&w| 2 * w - 1).product()
}

struct RelBias {
    table: String,
    index: Rc<Vec<u32>>,
    n: usize,
}

/// Multi-head self-attention over `(batch, tokens, channels)`.
pub struct Mhsa {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    dim: usize,
    rel: Option<RelBias>,
}

impl Mhsa {
    /// `rel_window` enables a learned relative-position bias for windows of
    /// that size.
    pub fn new(bld: &mut Builder, name: &str, dim: usize, heads: usize, rel_window: Option<[usize; 3]>) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("{} channels cannot be split into {} heads", dim, heads)));
        }
        let qkv = Linear::new(bld, &format!("{name}.qkv"), dim, 3 * dim, true);
        let proj = Linear::new(bld, &format!("{name}.proj"), dim, dim, true);
        let rel = rel_window.map(|w| {
            let table = bld.add(&format!("{name}.rel_bias"), &[relative_table_len(w), heads], Init::TruncNormal(0.02));
            let rpi = relative_position_index(w);
            let n = w.iter().product::<usize>();
            let mut index = Vec::with_capacity(heads * n * n);
            for h in 0..heads {
                index.extend(rpi.iter().map(|&r| (r * heads + h) as u32));
            }
            RelBias { table, index: Rc::new(index), n }
        });
        Ok(Mhsa { qkv, proj, heads, dim, rel })
    }

    pub fn qkv_weight_name(&self) -> &str {
        self.qkv.weight_name()
    }

    /// Returns the projected output and the attention weights
    /// `(batch, heads, tokens, tokens)`. `mask` is an additive
    /// `(windows, tokens, tokens)` bias where the batch axis is
    /// `samples × windows`.
    pub fn forward(&self, ctx: &Ctx, x: &Var, mask: Option<&Var>) -> (Var, Var) {
        let (bw, n, c) = (x.dim(0), x.dim(1), x.dim(2));
        assert_eq!(c, self.dim, "attention width mismatch");
        let (h, dh) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(ctx, x);
        let qkv = ops::permute(&ops::reshape(&qkv, &[bw, n, 3, h, dh]), &[2, 0, 3, 1, 4]);
        let part = |i: usize| ops::reshape(&ops::narrow(&qkv, 0, i, 1), &[bw, h, n, dh]);
        let q = ops::scale(&part(0), (dh as f32).powf(-0.5));
        let (k, v) = (part(1), part(2));
        let mut logits = ops::matmul_ex(&q, &k, false, true);
        if let Some(rel) = &self.rel {
            assert_eq!(rel.n, n, "relative bias built for {} tokens, got {}", rel.n, n);
            let bias = ops::gather(&ctx.p(&rel.table), rel.index.clone(), &[h, n, n]);
            logits = ops::add(&logits, &bias);
        }
        if let Some(m) = mask {
            let nw = m.dim(0);
            assert_eq!(bw % nw, 0, "mask windows do not divide the batch");
            let l5 = ops::reshape(&logits, &[bw / nw, nw, h, n, n]);
            let m5 = ops::reshape(m, &[nw, 1, n, n]);
            logits = ops::reshape(&ops::add(&l5, &m5), &[bw, h, n, n]);
        }
        let attn = ops::softmax_last(&logits);
        let out = ops::matmul(&attn, &v);
        let out = ops::reshape(&ops::permute(&out, &[0, 2, 1, 3]), &[bw, n, c]);
        (self.proj.forward(ctx, &out), attn)
    }
}

/// Non-overlapping 3D patches projected to `embed` channels.
pub struct PatchEmbed {
    proj: Conv3d,
    patch: [usize; 3],
}

impl PatchEmbed {
    pub fn new(bld: &mut Builder, name: &str, cin: usize, embed: usize, patch: [usize; 3]) -> Self {
        let proj = Conv3d::new(bld, &format!("{name}.proj"), cin, embed, patch, Conv3dSpec::strided(patch), true);
        PatchEmbed { proj, patch }
    }

    /// `(B, C, D, H, W)` to a token grid `(B, D/pd, H/ph, W/pw, embed)`.
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let s = x.shape();
        for a in 0..3 {
            if s[2 + a] % self.patch[a] != 0 {
                return Err(Error::config(format!(
                    "input {:?} is not divisible by patch size {:?}",
                    &s[2..],
                    self.patch
                )));
            }
        }
        Ok(to_channels_last(&self.proj.forward(ctx, x)))
    }
}

/// Halves the grid (depth optional) by concatenating each 2×2(×2)
/// neighbourhood and projecting it linearly.
pub struct PatchMerging {
    norm: LayerNorm,
    reduce: Linear,
    merge_depth: bool,
}

impl PatchMerging {
    pub fn new(bld: &mut Builder, name: &str, dim: usize, out_dim: usize, merge_depth: bool) -> Self {
        let k = if merge_depth { 8 } else { 4 };
        PatchMerging {
            norm: LayerNorm::new(bld, &format!("{name}.norm"), k * dim),
            reduce: Linear::new(bld, &format!("{name}.reduce"), k * dim, out_dim, false),
            merge_depth,
        }
    }

    pub fn output_dims(dims: [usize; 3], merge_depth: bool) -> Result<[usize; 3]> {
        let axes: &[usize] = if merge_depth { &[0, 1, 2] } else { &[1, 2] };
        for &a in axes {
            if dims[a] % 2 != 0 {
                return Err(Error::domain(format!(
                    "cannot merge patches of a {:?} grid: axis {} has odd length {}; \
                     resize the input so its spatial side is divisible by 32",
                    dims, a, dims[a]
                )));
            }
        }
        Ok([if merge_depth { dims[0] / 2 } else { dims[0] }, dims[1] / 2, dims[2] / 2])
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let (b, dims, c) = grid_dims(x);
        let od = Self::output_dims(dims, self.merge_depth)?;
        let fd = if self.merge_depth { 2 } else { 1 };
        let offsets: Vec<[usize; 3]> =
            (0..fd).flat_map(|z| (0..2).flat_map(move |y| (0..2).map(move |w| [z, y, w]))).collect();
        let per_sample = dims.iter().product::<usize>() * c;
        let mut index = Vec::with_capacity(b * od.iter().product::<usize>() * offsets.len() * c);
        for bi in 0..b {
            for z in 0..od[0] {
                for y in 0..od[1] {
                    for w in 0..od[2] {
                        for o in &offsets {
                            let src = ((z * fd + o[0]) * dims[1] + y * 2 + o[1]) * dims[2] + w * 2 + o[2];
                            let base = bi * per_sample + src * c;
                            index.extend((base..base + c).map(|v| v as u32));
                        }
                    }
                }
            }
        }
        let merged = ops::gather(x, Rc::new(index), &[b, od[0], od[1], od[2], offsets.len() * c]);
        Ok(self.reduce.forward(ctx, &self.norm.forward(ctx, &merged)))
    }
}

/// Pre-norm transformer block over `(batch, tokens, channels)`.
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: Mhsa,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(bld: &mut Builder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(bld, &format!("{name}.norm1"), dim),
            attn: Mhsa::new(bld, &format!("{name}.attn"), dim, heads, None)?,
            norm2: LayerNorm::new(bld, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(bld, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let (a, _) = self.attn.forward(ctx, &self.norm1.forward(ctx, x), None);
        let x = ops::add(x, &a);
        ops::add(&x, &self.mlp.forward(ctx, &self.norm2.forward(ctx, &x)))
    }
}

/// Shifted-window transformer block over a token grid of fixed size.
pub struct SwinBlock {
    norm1: LayerNorm,
    attn: Mhsa,
    norm2: LayerNorm,
    mlp: Mlp,
    cfg: WindowConfig,
    dims: [usize; 3],
    mask: Option<Var>,
}

impl SwinBlock {
    /// `dims` is the grid the block will see; the window is fitted to it.
    pub fn new(
        bld: &mut Builder,
        name: &str,
        dim: usize,
        heads: usize,
        cfg: WindowConfig,
        dims: [usize; 3],
        mlp_ratio: usize,
    ) -> Result<Self> {
        let cfg = cfg.fit(dims);
        let mask = window_attention_mask(dims, &cfg).map(|m| {
            let v = cfg.volume();
            Var::constant(m.clone(), &[m.len() / (v * v), v, v])
        });
        Ok(SwinBlock {
            norm1: LayerNorm::new(bld, &format!("{name}.norm1"), dim),
            attn: Mhsa::new(bld, &format!("{name}.attn"), dim, heads, Some(cfg.window))?,
            norm2: LayerNorm::new(bld, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(bld, &format!("{name}.mlp"), dim, dim * mlp_ratio),
            cfg,
            dims,
            mask,
        })
    }

    pub fn window(&self) -> WindowConfig {
        self.cfg
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let (b, dims, c) = grid_dims(x);
        assert_eq!(dims, self.dims, "block built for {:?}, got {:?}", self.dims, dims);
        let padded = padded_dims(dims, self.cfg.window);
        let h = self.norm1.forward(ctx, x);
        let pads = [(0, 0), (0, padded[0] - dims[0]), (0, padded[1] - dims[1]), (0, padded[2] - dims[2]), (0, 0)];
        let h = cyclic_shift(&ops::pad(&h, &pads), self.cfg.shift);
        let (win, layout) = window_partition(&h, self.cfg.window);
        let (a, _) = self.attn.forward(ctx, &win, self.mask.as_ref());
        let h = reverse_cyclic_shift(&window_reverse(&a, &layout), self.cfg.shift);
        let h = if padded == dims {
            h
        } else {
            let h = ops::narrow(&h, 1, 0, dims[0]);
            let h = ops::narrow(&h, 2, 0, dims[1]);
            ops::narrow(&h, 3, 0, dims[2])
        };
        debug_assert_eq!(h.shape(), &[b, dims[0], dims[1], dims[2], c]);
        let x = ops::add(x, &h);
        ops::add(&x, &self.mlp.forward(ctx, &self.norm2.forward(ctx, &x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nowcast_tensor::numel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iota(shape: &[usize]) -> Var {
        Var::constant((0..numel(shape)).map(|v| v as f32).collect(), shape)
    }

    #[test]
    fn single_window() {
        let (w, layout) = window_partition(&iota(&[1, 2, 2, 2, 3]), [2, 2, 2]);
        assert_eq!(w.shape(), &[1, 8, 3]);
        assert_eq!(layout.num_windows(), 1);
    }

    #[test]
    fn first_window_matches_nested_loop_oracle() {
        let x = iota(&[1, 2, 4, 4, 1]);
        let (w, _) = window_partition(&x, [2, 2, 2]);
        let mut oracle = Vec::new();
        for z in 0..2 {
            for y in 0..2 {
                for xx in 0..2 {
                    oracle.push((z * 16 + y * 4 + xx) as f32);
                }
            }
        }
        assert_eq!(&w.data()[..8], oracle.as_slice());
        assert_eq!(oracle, vec![0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
    }

    #[test]
    fn padded_round_trip() {
        let x = iota(&[2, 3, 5, 7, 2]);
        let (w, layout) = window_partition(&x, [2, 4, 4]);
        assert_eq!(layout.padded, [4, 8, 8]);
        assert_eq!(window_reverse(&w, &layout).data(), x.data());
        let valid = layout.valid();
        assert_eq!(valid.iter().filter(|&&v| v).count(), 3 * 5 * 7);
    }

    #[test]
    fn shift_examples() {
        let x = Var::constant(vec![1.0, 2.0, 3.0], &[1, 1, 3, 1, 1]);
        assert_eq!(cyclic_shift(&x, [0, 1, 0]).data(), &[2.0, 3.0, 1.0]);
        assert_eq!(cyclic_shift(&x, [0, 0, 0]).data(), x.data());
        assert_eq!(cyclic_shift(&x, [0, 3, 0]).data(), x.data());
        let y = iota(&[1, 4, 4, 4, 2]);
        assert_eq!(reverse_cyclic_shift(&cyclic_shift(&y, [1, 2, 3]), [1, 2, 3]).data(), y.data());
    }

    #[test]
    fn window_config_rejects_large_shift() {
        assert!(WindowConfig::new([2, 4, 4], [1, 4, 2]).unwrap_err().is_config());
        let w = WindowConfig::new([2, 4, 4], [1, 2, 2]).unwrap().fit([1, 8, 3]);
        assert_eq!(w.window, [1, 4, 3]);
        assert_eq!(w.shift, [0, 2, 0]);
    }

    fn mhsa(dim: usize, heads: usize, rel: Option<[usize; 3]>) -> (Mhsa, crate::params::ParamStore) {
        let mut bld = Builder::new(1);
        let m = Mhsa::new(&mut bld, "a", dim, heads, rel).unwrap();
        let mut store = bld.finish();
        // make biases non-trivial
        for (_, p) in store.iter_mut() {
            if p.shape.len() == 1 {
                p.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.37).sin() * 0.1);
            }
        }
        (m, store)
    }

    fn random_var(shape: &[usize], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant((0..numel(shape)).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (m, store) = mhsa(8, 2, Some([1, 2, 2]));
        let ctx = Ctx::eval(&store);
        let (_, attn) = m.forward(&ctx, &random_var(&[3, 4, 8], 2), None);
        for row in attn.data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (m, store) = mhsa(4, 2, None);
        let ctx = Ctx::eval(&store);
        let x = random_var(&[1, 1, 4], 3);
        let (out, attn) = m.forward(&ctx, &x, None);
        assert_eq!(attn.data(), &[1.0, 1.0]);
        // value projection of the token, then the output projection
        let qkv = store.get("a.qkv.weight").unwrap();
        let qb = &store.get("a.qkv.bias").unwrap().data;
        let v: Vec<f32> = (0..4)
            .map(|o| qb[8 + o] + (0..4).map(|i| qkv.data[(8 + o) * 4 + i] * x.data()[i]).sum::<f32>())
            .collect();
        let pw = &store.get("a.proj.weight").unwrap().data;
        let pb = &store.get("a.proj.bias").unwrap().data;
        for o in 0..4 {
            let want = pb[o] + (0..4).map(|i| pw[o * 4 + i] * v[i]).sum::<f32>();
            assert!((out.data()[o] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let (m, mut store) = mhsa(8, 2, None);
        let w = store.get_mut("a.qkv.weight").unwrap();
        w.data[16 * 8..].iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("a.qkv.bias").unwrap().data[16..].iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("a.proj.bias").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let ctx = Ctx::eval(&store);
        let (out, _) = m.forward(&ctx, &random_var(&[2, 5, 8], 4), None);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_tokens_permutes_output() {
        let (m, store) = mhsa(8, 4, None);
        let ctx = Ctx::eval(&store);
        let x = random_var(&[1, 5, 8], 5);
        let perm = [3usize, 0, 4, 1, 2];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(&x.data()[p * 8..(p + 1) * 8]);
        }
        let (a, _) = m.forward(&ctx, &x, None);
        let (b, _) = m.forward(&ctx, &Var::constant(px, &[1, 5, 8]), None);
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..8 {
                assert!((b.data()[i * 8 + k] - a.data()[p * 8 + k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut bld = Builder::new(0);
        assert!(Mhsa::new(&mut bld, "a", 10, 4, None).err().unwrap().is_config());
    }

    #[test]
    fn relative_bias_is_translation_invariant() {
        let (m, store) = mhsa(4, 2, Some([1, 2, 2]));
        let ctx = Ctx::eval(&store);
        // a 1×2×4 grid whose two 1×2×2 windows hold identical content
        let base = random_var(&[1, 1, 2, 2, 4], 6).to_vec();
        let mut grid = vec![0.0; 16 * 2];
        for y in 0..2 {
            for x in 0..4 {
                for c in 0..4 {
                    grid[(y * 4 + x) * 4 + c] = base[(y * 2 + x % 2) * 4 + c];
                }
            }
        }
        let (w, _) = window_partition(&Var::constant(grid, &[1, 1, 2, 4, 4]), [1, 2, 2]);
        let (_, attn) = m.forward(&ctx, &w, None);
        let per = attn.numel() / 2;
        assert_eq!(&attn.data()[..per], &attn.data()[per..]);
    }

    #[test]
    fn merging_shapes() {
        let mut bld = Builder::new(0);
        let m = PatchMerging::new(&mut bld, "m", 3, 6, true);
        let s = PatchMerging::new(&mut bld, "s", 3, 3, false);
        let store = bld.finish();
        let ctx = Ctx::eval(&store);
        let y = m.forward(&ctx, &random_var(&[1, 8, 8, 8, 3], 7)).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4, 6]);
        let y = s.forward(&ctx, &random_var(&[2, 3, 4, 4, 3], 8)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2, 3]);

        let mut dims = [1, 256, 256];
        for _ in 0..5 {
            dims = PatchMerging::output_dims(dims, false).unwrap();
        }
        assert_eq!(dims, [1, 8, 8]);
        let mut dims = [1, 252, 252];
        let mut halvings = 0;
        let err = loop {
            match PatchMerging::output_dims(dims, false) {
                Ok(d) => {
                    dims = d;
                    halvings += 1;
                }
                Err(e) => break e,
            }
        };
        assert_eq!(halvings, 2, "252 / 4 = 63 is odd");
        assert!(err.to_string().contains("divisible by 32"));
    }

    #[test]
    fn shifted_mask_separates_wrapped_regions() {
        let cfg = WindowConfig::new([1, 2, 2], [0, 1, 1]).unwrap();
        let m = window_attention_mask([1, 4, 4], &cfg).unwrap();
        // 4 windows of 4 tokens; the first window sees no wrapped tokens
        assert!(m[..16].iter().all(|&v| v == 0.0));
        // the last window mixes all four regions: only the diagonal survives
        let last = &m[48..];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(last[i * 4 + j] == 0.0, i == j);
            }
        }
        let plain = WindowConfig::new([1, 2, 2], [0, 0, 0]).unwrap();
        assert!(window_attention_mask([1, 4, 4], &plain).is_none());
        let padded = window_attention_mask([1, 3, 4], &plain).unwrap();
        assert_eq!(padded.iter().filter(|v| v.is_infinite()).count(), 2 * 2 * 4);
    }

    #[test]
    fn swin_block_keeps_shape_and_is_finite() {
        let mut bld = Builder::new(2);
        let cfg = WindowConfig::new([2, 4, 4], [1, 2, 2]).unwrap();
        let blk = SwinBlock::new(&mut bld, "b", 8, 2, cfg, [3, 6, 5], 2).unwrap();
        let store = bld.finish();
        let ctx = Ctx::eval(&store);
        let y = blk.forward(&ctx, &random_var(&[2, 3, 6, 5, 8], 9));
        assert_eq!(y.shape(), &[2, 3, 6, 5, 8]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}
