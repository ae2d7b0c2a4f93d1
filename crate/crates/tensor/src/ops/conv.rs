use std::rc::Rc;

use crate::ops::linalg::{gemm, Layout};
use crate::ops::shape::gather;
use crate::var::Var;

/// Stride and zero padding of a 3D convolution, per (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn same(kernel: [usize; 3]) -> Self {
        Conv3dSpec { stride: [1; 3], padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2] }
    }

    pub fn strided(stride: [usize; 3]) -> Self {
        Conv3dSpec { stride, padding: [0; 3] }
    }
}

// Upper bound on im2col buffer size (floats) per chunk.
const COL_BUDGET: usize = 1 << 22;

struct ConvGeom {
    c: usize,
    in_dims: [usize; 3],
    k: [usize; 3],
    out_dims: [usize; 3],
    spec: Conv3dSpec,
}

impl ConvGeom {
    fn ck(&self) -> usize {
        self.c * self.k[0] * self.k[1] * self.k[2]
    }

    fn positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn rows(&self) -> usize {
        self.out_dims[0] * self.out_dims[1]
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.ck() * self.out_dims[2]).max(1)).max(1)
    }

    /// Valid output-column range `[lo, hi)` for kernel offset `kw`.
    fn col_range(&self, kw: usize) -> (usize, usize) {
        let (w, ow, s, p) = (self.in_dims[2], self.out_dims[2], self.spec.stride[2], self.spec.padding[2]);
        let lo = if kw >= p { 0 } else { (p - kw).div_ceil(s) };
        // need ow*s + kw - p < w  =>  ow < (w + p - kw) / s, rounded up
        let hi = if w + p <= kw { 0 } else { ((w + p - kw).div_ceil(s)).min(ow) };
        (lo.min(hi), hi)
    }

    /// Visits the im2col matrix restricted to output rows `[r0, r1)` as runs:
    /// `f(col_row, first_chunk_col, first_input_index, len)`, where run
    /// element `t` pairs chunk column `j0 + t` with input `i0 + t * stride_w`.
    fn for_each_run(&self, r0: usize, r1: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [d, h, w] = self.in_dims;
        let [kd_n, kh_n, kw_n] = self.k;
        let [_, oh_n, ow_n] = self.out_dims;
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.padding;
        let mut r = 0;
        for c in 0..self.c {
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let (lo, hi) = self.col_range(kw);
                        for row in r0..r1 {
                            let (od, oh) = (row / oh_n, row % oh_n);
                            let id = (od * sd + kd) as isize - pd as isize;
                            let ih = (oh * sh + kh) as isize - ph as isize;
                            if hi <= lo || id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let base = ((c * d + id as usize) * h + ih as usize) * w;
                            f(r, (row - r0) * ow_n + lo, base + lo * sw + kw - pw, hi - lo);
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f32], r0: usize, r1: usize, cols: &mut Vec<f32>) {
        let pc = (r1 - r0) * self.out_dims[2];
        let sw = self.spec.stride[2];
        cols.clear();
        cols.resize(self.ck() * pc, 0.0);
        self.for_each_run(r0, r1, |r, j0, i0, len| {
            let dst = &mut cols[r * pc + j0..r * pc + j0 + len];
            if sw == 1 {
                dst.copy_from_slice(&x[i0..i0 + len]);
            } else {
                for (t, v) in dst.iter_mut().enumerate() {
                    *v = x[i0 + t * sw];
                }
            }
        });
    }

    fn col2im(&self, cols: &[f32], r0: usize, r1: usize, gx: &mut [f32]) {
        let pc = (r1 - r0) * self.out_dims[2];
        let sw = self.spec.stride[2];
        self.for_each_run(r0, r1, |r, j0, i0, len| {
            let src = &cols[r * pc + j0..r * pc + j0 + len];
            if sw == 1 {
                for (g, v) in gx[i0..i0 + len].iter_mut().zip(src) {
                    *g += v;
                }
            } else {
                for (t, v) in src.iter().enumerate() {
                    gx[i0 + t * sw] += v;
                }
            }
        });
    }
}

fn out_len(input: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(input + 2 * p >= k, "kernel {} larger than padded input {}", k, input + 2 * p);
    (input + 2 * p - k) / s + 1
}

/// 3D convolution over `(N, C, D, H, W)` with weights `(O, C, KD, KH, KW)`.
pub fn conv3d(x: &Var, w: &Var, bias: Option<&Var>, spec: Conv3dSpec) -> Var {
    assert_eq!(x.rank(), 5, "conv3d input must be (N, C, D, H, W), got {:?}", x.shape());
    assert_eq!(w.rank(), 5, "conv3d weight must be (O, C, KD, KH, KW)");
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let o = w.dim(0);
    assert_eq!(w.dim(1), c, "conv3d channel mismatch: input {:?} weight {:?}", s, w.shape());
    let k = [w.dim(2), w.dim(3), w.dim(4)];
    let in_dims = [s[2], s[3], s[4]];
    let out_dims = [
        out_len(in_dims[0], k[0], spec.stride[0], spec.padding[0]),
        out_len(in_dims[1], k[1], spec.stride[1], spec.padding[1]),
        out_len(in_dims[2], k[2], spec.stride[2], spec.padding[2]),
    ];
    let geom = Rc::new(ConvGeom { c, in_dims, k, out_dims, spec });
    let p = geom.positions();
    let ck = geom.ck();
    let in_sz = c * in_dims.iter().product::<usize>();
    let rows = geom.rows();
    let rpc = geom.rows_per_chunk();
    let wo = out_dims[2];

    let mut out = vec![0.0f32; n * o * p];
    let mut cols = Vec::new();
    for b in 0..n {
        let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * o * p..(b + 1) * o * p];
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + rpc).min(rows);
            let pc = (r1 - r0) * wo;
            geom.im2col(xb, r0, r1, &mut cols);
            gemm(
                o,
                ck,
                pc,
                w.data(),
                Layout::row_major(ck),
                &cols,
                Layout::row_major(pc),
                0.0,
                &mut ob[r0 * wo..],
                Layout::row_major(p),
            );
            r0 = r1;
        }
        if let Some(bias) = bias {
            for (oc, &bv) in bias.data().iter().enumerate() {
                ob[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    let shape = vec![n, o, out_dims[0], out_dims[1], out_dims[2]];
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (xv, wv) = (x.clone(), w.clone());
    let has_bias = bias.is_some();
    let bias_grad = bias.map(Var::requires_grad).unwrap_or(false);
    Var::from_op(out, shape, parents, move |g| {
        let need_x = xv.requires_grad();
        let need_w = wv.requires_grad();
        let mut gx = need_x.then(|| vec![0.0f32; xv.numel()]);
        let mut gw = need_w.then(|| vec![0.0f32; wv.numel()]);
        let mut cols = Vec::new();
        let mut gcols = Vec::new();
        for b in 0..n {
            let xb = &xv.data()[b * in_sz..(b + 1) * in_sz];
            let gb = &g[b * o * p..(b + 1) * o * p];
            let mut r0 = 0;
            while r0 < rows {
                let r1 = (r0 + rpc).min(rows);
                let pc = (r1 - r0) * wo;
                let gchunk = &gb[r0 * wo..];
                if let Some(gw) = gw.as_mut() {
                    geom.im2col(xb, r0, r1, &mut cols);
                    gemm(
                        o,
                        pc,
                        ck,
                        gchunk,
                        Layout::row_major(p),
                        &cols,
                        Layout::row_major(pc).t(),
                        1.0,
                        gw,
                        Layout::row_major(ck),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    gcols.clear();
                    gcols.resize(ck * pc, 0.0);
                    gemm(
                        ck,
                        o,
                        pc,
                        wv.data(),
                        Layout::row_major(ck).t(),
                        gchunk,
                        Layout::row_major(p),
                        0.0,
                        &mut gcols,
                        Layout::row_major(pc),
                    );
                    geom.col2im(&gcols, r0, r1, &mut gx[b * in_sz..(b + 1) * in_sz]);
                }
                r0 = r1;
            }
        }
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(bias_grad.then(|| {
                let mut gbias = vec![0.0f32; o];
                for b in 0..n {
                    for (oc, acc) in gbias.iter_mut().enumerate() {
                        let s = (b * o + oc) * p;
                        *acc += g[s..s + p].iter().sum::<f32>();
                    }
                }
                gbias
            }));
        }
        grads
    })
}

/// 2D convolution on `(N, C, H, W)` with weights `(O, C, KH, KW)`, as a
/// depth-1 3D convolution.
pub fn conv2d(x: &Var, w: &Var, bias: Option<&Var>, stride: [usize; 2], padding: [usize; 2]) -> Var {
    use crate::ops::reshape;
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let x5 = reshape(x, &[n, c, 1, h, wd]);
    let w5 = reshape(w, &[o, c, 1, kh, kw]);
    let spec = Conv3dSpec { stride: [1, stride[0], stride[1]], padding: [0, padding[0], padding[1]] };
    let y = conv3d(&x5, &w5, bias, spec);
    let (ho, wo) = (y.dim(3), y.dim(4));
    reshape(&y, &[n, o, ho, wo])
}

/// Transposed 3D convolution whose kernel equals its stride (no overlap),
/// weights `(C, O, KD, KH, KW)`. Every input voxel expands into one
/// `KD×KH×KW` output block.
pub fn conv_transpose3d(x: &Var, w: &Var, bias: Option<&Var>) -> Var {
    assert_eq!(x.rank(), 5);
    let s = x.shape();
    let (n, c, d, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
    assert_eq!(w.dim(0), c, "conv_transpose3d channel mismatch");
    let o = w.dim(1);
    let k = [w.dim(2), w.dim(3), w.dim(4)];
    let kvol = k[0] * k[1] * k[2];
    let ok = o * kvol;
    let dhw = d * h * wd;
    let (od, oh, ow) = (d * k[0], h * k[1], wd * k[2]);
    let out_sz = o * od * oh * ow;

    // position of Y[(o, kd, kh, kw), (d, h, w)] inside one output sample
    let mut scatter = Vec::with_capacity(ok * dhw);
    for oc in 0..o {
        for kd in 0..k[0] {
            for kh in 0..k[1] {
                for kw in 0..k[2] {
                    for z in 0..d {
                        for y in 0..h {
                            for xw in 0..wd {
                                let idx = ((oc * od + z * k[0] + kd) * oh + y * k[1] + kh) * ow + xw * k[2] + kw;
                                scatter.push(idx as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    let scatter = Rc::new(scatter);

    let mut out = vec![0.0f32; n * out_sz];
    let mut ybuf = vec![0.0f32; ok * dhw];
    for b in 0..n {
        gemm(
            ok,
            c,
            dhw,
            w.data(),
            Layout::row_major(ok).t(),
            &x.data()[b * c * dhw..(b + 1) * c * dhw],
            Layout::row_major(dhw),
            0.0,
            &mut ybuf,
            Layout::row_major(dhw),
        );
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        for (&dst, &v) in scatter.iter().zip(&ybuf) {
            ob[dst as usize] = v;
        }
        if let Some(bias) = bias {
            let plane = od * oh * ow;
            for (oc, &bv) in bias.data().iter().enumerate() {
                ob[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let shape = vec![n, o, od, oh, ow];
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (xv, wv) = (x.clone(), w.clone());
    let has_bias = bias.is_some();
    let bias_grad = bias.map(Var::requires_grad).unwrap_or(false);
    Var::from_op(out, shape, parents, move |g| {
        let mut gx = xv.requires_grad().then(|| vec![0.0f32; xv.numel()]);
        let mut gw = wv.requires_grad().then(|| vec![0.0f32; wv.numel()]);
        let mut yg = vec![0.0f32; ok * dhw];
        for b in 0..n {
            let gb = &g[b * out_sz..(b + 1) * out_sz];
            for (slot, &src) in yg.iter_mut().zip(scatter.iter()) {
                *slot = gb[src as usize];
            }
            if let Some(gx) = gx.as_mut() {
                gemm(
                    c,
                    ok,
                    dhw,
                    wv.data(),
                    Layout::row_major(ok),
                    &yg,
                    Layout::row_major(dhw),
                    0.0,
                    &mut gx[b * c * dhw..(b + 1) * c * dhw],
                    Layout::row_major(dhw),
                );
            }
            if let Some(gw) = gw.as_mut() {
                gemm(
                    c,
                    dhw,
                    ok,
                    &xv.data()[b * c * dhw..(b + 1) * c * dhw],
                    Layout::row_major(dhw),
                    &yg,
                    Layout::row_major(dhw).t(),
                    1.0,
                    gw,
                    Layout::row_major(ok),
                );
            }
        }
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(bias_grad.then(|| {
                let plane = od * oh * ow;
                let mut gbias = vec![0.0f32; o];
                for b in 0..n {
                    for (oc, acc) in gbias.iter_mut().enumerate() {
                        let s = b * out_sz + oc * plane;
                        *acc += g[s..s + plane].iter().sum::<f32>();
                    }
                }
                gbias
            }));
        }
        grads
    })
}

/// Non-overlapping max pooling (kernel = stride) on `(N, C, D, H, W)`;
/// trailing remainders are dropped.
pub fn max_pool3d(x: &Var, k: [usize; 3]) -> Var {
    assert_eq!(x.rank(), 5);
    let s = x.shape();
    let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
    let (od, oh, ow) = (d / k[0], h / k[1], w / k[2]);
    assert!(od > 0 && oh > 0 && ow > 0, "max_pool3d window larger than input {:?}", s);
    let mut index = Vec::with_capacity(nc * od * oh * ow);
    let data = x.data();
    for plane in 0..nc {
        let base = plane * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xw in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f32::NEG_INFINITY;
                    for kz in 0..k[0] {
                        for ky in 0..k[1] {
                            for kx in 0..k[2] {
                                let i = base + ((z * k[0] + kz) * h + y * k[1] + ky) * w + xw * k[2] + kx;
                                if best == usize::MAX || data[i] > best_v {
                                    best = i;
                                    best_v = data[i];
                                }
                            }
                        }
                    }
                    index.push(best as u32);
                }
            }
        }
    }
    gather(x, Rc::new(index), &[s[0], s[1], od, oh, ow])
}

/// Nearest-neighbour upsampling of `(N, C, D, H, W)` by integer factors.
pub fn upsample_nearest3d(x: &Var, f: [usize; 3]) -> Var {
    assert_eq!(x.rank(), 5);
    let s = x.shape();
    let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
    let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
    let mut index = Vec::with_capacity(nc * od * oh * ow);
    for plane in 0..nc {
        for z in 0..od {
            for y in 0..oh {
                let row = plane * d * h * w + ((z / f[0]) * h + y / f[1]) * w;
                index.extend((0..ow).map(|xw| (row + xw / f[2]) as u32));
            }
        }
    }
    gather(x, Rc::new(index), &[s[0], s[1], od, oh, ow])
}
