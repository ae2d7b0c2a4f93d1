use std::rc::Rc;

use crate::var::{numel, Var};

/// Index value meaning "emit zero" in [`gather`].
pub const ZERO_INDEX: u32 = u32::MAX;

pub fn reshape(x: &Var, shape: &[usize]) -> Var {
    assert_eq!(
        numel(shape),
        x.numel(),
        "reshape {:?} -> {:?} changes element count",
        x.shape(),
        shape
    );
    Var::from_shared(x.shared_data(), shape.to_vec(), vec![x.clone()], |g| vec![Some(g.to_vec())])
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|k| data[base + k * inner_stride]));
        }
        if rank < 2 {
            break;
        }
        let mut axis = rank - 2;
        loop {
            idx[axis] += 1;
            base += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
            if axis == 0 {
                break;
            }
            axis -= 1;
        }
    }
    out
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Var, axes: &[usize]) -> Var {
    let rank = x.rank();
    assert_eq!(axes.len(), rank, "permute needs one entry per axis");
    let mut seen = vec![false; rank];
    for &a in axes {
        assert!(a < rank && !seen[a], "invalid permutation {:?}", axes);
        seen[a] = true;
    }
    if axes.iter().enumerate().all(|(i, &a)| i == a) {
        return x.clone();
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.dim(a)).collect();
    let out = permute_data(x.data(), x.shape(), axes);
    let mut inverse = vec![0; rank];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    let gshape = out_shape.clone();
    Var::from_op(out, out_shape, vec![x.clone()], move |g| {
        vec![Some(permute_data(g, &gshape, &inverse))]
    })
}

/// Contiguous sub-range `[start, start+len)` along `axis`.
pub fn narrow(x: &Var, axis: usize, start: usize, len: usize) -> Var {
    let shape = x.shape().to_vec();
    assert!(start + len <= shape[axis], "narrow out of range on {:?}", shape);
    if start == 0 && len == shape[axis] {
        return x.clone();
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let src_block = shape[axis] * inner;
    let dst_block = len * inner;
    let mut out = Vec::with_capacity(outer * dst_block);
    for o in 0..outer {
        let s = o * src_block + start * inner;
        out.extend_from_slice(&x.data()[s..s + dst_block]);
    }
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    let total = x.numel();
    Var::from_op(out, out_shape, vec![x.clone()], move |g| {
        let mut gx = vec![0.0f32; total];
        for o in 0..outer {
            let s = o * src_block + start * inner;
            gx[s..s + dst_block].copy_from_slice(&g[o * dst_block..(o + 1) * dst_block]);
        }
        vec![Some(gx)]
    })
}

/// Concatenation along `axis`; all other axes must agree.
pub fn cat(xs: &[Var], axis: usize) -> Var {
    assert!(!xs.is_empty(), "cat of nothing");
    let first = xs[0].shape().to_vec();
    for x in xs {
        assert_eq!(x.rank(), first.len());
        for (i, (&a, &b)) in x.shape().iter().zip(&first).enumerate() {
            assert!(i == axis || a == b, "cat shape mismatch {:?} vs {:?}", x.shape(), first);
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let blocks: Vec<usize> = xs.iter().map(|x| x.dim(axis) * inner).collect();
    let total_block: usize = blocks.iter().sum();
    let mut out = Vec::with_capacity(outer * total_block);
    for o in 0..outer {
        for (x, &blk) in xs.iter().zip(&blocks) {
            out.extend_from_slice(&x.data()[o * blk..(o + 1) * blk]);
        }
    }
    let mut out_shape = first.clone();
    out_shape[axis] = xs.iter().map(|x| x.dim(axis)).sum();
    let needs: Vec<bool> = xs.iter().map(Var::requires_grad).collect();
    Var::from_op(out, out_shape, xs.to_vec(), move |g| {
        let mut grads: Vec<Option<Vec<f32>>> = needs
            .iter()
            .zip(&blocks)
            .map(|(&n, &blk)| n.then(|| Vec::with_capacity(outer * blk)))
            .collect();
        for o in 0..outer {
            let mut off = o * total_block;
            for (gr, &blk) in grads.iter_mut().zip(&blocks) {
                if let Some(gr) = gr {
                    gr.extend_from_slice(&g[off..off + blk]);
                }
                off += blk;
            }
        }
        grads
    })
}

/// `out[i] = x[index[i]]`, or zero where `index[i] == ZERO_INDEX`.
/// The backward pass scatter-adds, so indices may repeat.
pub fn gather(x: &Var, index: Rc<Vec<u32>>, out_shape: &[usize]) -> Var {
    assert_eq!(index.len(), numel(out_shape), "gather index/shape mismatch");
    let src = x.data();
    let out: Vec<f32> = index
        .iter()
        .map(|&i| if i == ZERO_INDEX { 0.0 } else { src[i as usize] })
        .collect();
    let n = x.numel();
    Var::from_op(out, out_shape.to_vec(), vec![x.clone()], move |g| {
        let mut gx = vec![0.0f32; n];
        for (&i, &gv) in index.iter().zip(g) {
            if i != ZERO_INDEX {
                gx[i as usize] += gv;
            }
        }
        vec![Some(gx)]
    })
}

/// Repeats each entry along `axis` `times` times in place (`[a, b]` becomes
/// `[a, a, b, b]` for `times = 2`).
pub fn repeat_interleave(x: &Var, axis: usize, times: usize) -> Var {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut index = Vec::with_capacity(x.numel() * times);
    for o in 0..outer {
        for j in 0..len * times {
            let src = (o * len + j / times) * inner;
            index.extend((src..src + inner).map(|v| v as u32));
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len * times;
    gather(x, Rc::new(index), &out_shape)
}

/// Cyclic roll: `out[i] = x[(i - shift) mod len]` along each listed axis.
pub fn roll(x: &Var, shifts: &[(usize, isize)]) -> Var {
    let shape = x.shape().to_vec();
    let strides = contiguous_strides(&shape);
    let mut index: Vec<u32> = (0..x.numel() as u32).collect();
    for &(axis, shift) in shifts {
        let len = shape[axis] as isize;
        let s = shift.rem_euclid(len.max(1));
        if s == 0 {
            continue;
        }
        let prev = index.clone();
        for (flat, slot) in index.iter_mut().enumerate() {
            let coord = (flat / strides[axis]) % shape[axis];
            let src_coord = (coord as isize - s).rem_euclid(len) as usize;
            let src_flat = flat - coord * strides[axis] + src_coord * strides[axis];
            *slot = prev[src_flat];
        }
    }
    gather(x, Rc::new(index), &shape)
}

/// Running sum along `axis`: `out[i] = x[0] + ... + x[i]`.
pub fn cumsum(x: &Var, axis: usize) -> Var {
    let shape = x.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let scan = move |src: &[f32], reverse: bool| {
        let mut out = src.to_vec();
        for o in 0..outer {
            let base = o * len * inner;
            for j in 1..len {
                let (cur, prev) = if reverse { (len - 1 - j, len - j) } else { (j, j - 1) };
                for k in 0..inner {
                    out[base + cur * inner + k] += out[base + prev * inner + k];
                }
            }
        }
        out
    };
    let out = scan(x.data(), false);
    Var::from_op(out, shape, vec![x.clone()], move |g| vec![Some(scan(g, true))])
}

/// Zero padding: `pads[axis] = (before, after)`.
pub fn pad(x: &Var, pads: &[(usize, usize)]) -> Var {
    let shape = x.shape().to_vec();
    assert_eq!(pads.len(), shape.len());
    if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
        return x.clone();
    }
    let out_shape: Vec<usize> = shape.iter().zip(pads).map(|(&s, &(a, b))| s + a + b).collect();
    let in_strides = contiguous_strides(&shape);
    let out_strides = contiguous_strides(&out_shape);
    let mut index = vec![ZERO_INDEX; numel(&out_shape)];
    for (flat, slot) in index.iter_mut().enumerate() {
        let mut src = 0usize;
        let mut inside = true;
        for ax in 0..shape.len() {
            let c = (flat / out_strides[ax]) % out_shape[ax];
            if c < pads[ax].0 || c >= pads[ax].0 + shape[ax] {
                inside = false;
                break;
            }
            src += (c - pads[ax].0) * in_strides[ax];
        }
        if inside {
            *slot = src as u32;
        }
    }
    gather(x, Rc::new(index), &out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Var {
        Var::leaf((0..numel(shape)).map(|v| v as f32).collect(), shape)
    }

    #[test]
    fn cumsum_along_middle_axis() {
        let y = cumsum(&iota(&[1, 3, 2]), 1);
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let x = iota(&[2, 3, 4]);
        let y = permute(&x, &[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(y.data()[a * 6 + b * 3 + c], x.data()[b * 12 + c * 4 + a]);
                }
            }
        }
    }

    #[test]
    fn narrow_and_cat_invert() {
        let x = iota(&[2, 5, 3]);
        let a = narrow(&x, 1, 0, 2);
        let b = narrow(&x, 1, 2, 3);
        let y = cat(&[a, b], 1);
        assert_eq!(y.data(), x.data());
        y.backward_with(vec![1.0; 30]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 30]);
    }

    #[test]
    fn roll_shifts_forward() {
        let x = Var::constant(vec![1.0, 2.0, 3.0], &[3]);
        assert_eq!(roll(&x, &[(0, 1)]).data(), &[3.0, 1.0, 2.0]);
        assert_eq!(roll(&x, &[(0, -1)]).data(), &[2.0, 3.0, 1.0]);
        assert_eq!(roll(&x, &[(0, 3)]).data(), x.data());
    }

    #[test]
    fn repeat_interleave_duplicates_in_place() {
        let x = Var::constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = repeat_interleave(&x, 1, 2);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn pad_then_narrow_is_identity() {
        let x = iota(&[2, 3]);
        let p = pad(&x, &[(1, 0), (2, 1)]);
        assert_eq!(p.shape(), &[3, 6]);
        let back = narrow(&narrow(&p, 0, 1, 2), 1, 2, 3);
        assert_eq!(back.data(), x.data());
    }
}
