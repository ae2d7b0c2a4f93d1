use crate::var::Var;

/// Source taps for one output coordinate of a linear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f32,
    w1: f32,
}

/// Half-pixel-centred linear interpolation weights (the `align_corners =
/// false` convention), clamped at the borders.
fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l = (src - i0 as f64).clamp(0.0, 1.0) as f32;
            Tap { i0, i1, w0: 1.0 - l, w1: l }
        })
        .collect()
}

/// Bilinear resize of the two trailing axes to `(out_h, out_w)`. Leading
/// axes are treated as independent planes.
pub fn resize_bilinear(x: &Var, out_h: usize, out_w: usize) -> Var {
    let r = x.rank();
    assert!(r >= 2, "resize needs (.., H, W)");
    let (h, w) = (x.dim(r - 2), x.dim(r - 1));
    if h == out_h && w == out_w {
        return x.clone();
    }
    let planes = x.numel() / (h * w);
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = vec![0.0f32; planes * out_h * out_w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, ty) in ty.iter().enumerate() {
            let r0 = &src[ty.i0 * w..(ty.i0 + 1) * w];
            let r1 = &src[ty.i1 * w..(ty.i1 + 1) * w];
            for (ox, tx) in tx.iter().enumerate() {
                let top = tx.w0 * r0[tx.i0] + tx.w1 * r0[tx.i1];
                let bot = tx.w0 * r1[tx.i0] + tx.w1 * r1[tx.i1];
                dst[oy * out_w + ox] = ty.w0 * top + ty.w1 * bot;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Var::from_op(out, shape, vec![x.clone()], move |g| {
        let mut gx = vec![0.0f32; planes * h * w];
        for p in 0..planes {
            let gsrc = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
            let gdst = &mut gx[p * h * w..(p + 1) * h * w];
            for (oy, ty) in ty.iter().enumerate() {
                for (ox, tx) in tx.iter().enumerate() {
                    let gv = gsrc[oy * out_w + ox];
                    gdst[ty.i0 * w + tx.i0] += ty.w0 * tx.w0 * gv;
                    gdst[ty.i0 * w + tx.i1] += ty.w0 * tx.w1 * gv;
                    gdst[ty.i1 * w + tx.i0] += ty.w1 * tx.w0 * gv;
                    gdst[ty.i1 * w + tx.i1] += ty.w1 * tx.w1 * gv;
                }
            }
        }
        vec![Some(gx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upscale_two_by_two_matches_reference_values() {
        // torch.nn.functional.interpolate(.., size=4, mode="bilinear", align_corners=False)
        let x = Var::constant(vec![0.0, 1.0, 2.0, 3.0], &[2, 2]);
        let y = resize_bilinear(&x, 4, 4);
        let expected = [
            0.0, 0.25, 0.75, 1.0, 0.5, 0.75, 1.25, 1.5, 1.5, 1.75, 2.25, 2.5, 2.0, 2.25, 2.75, 3.0,
        ];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn downscale_by_two_averages_pairs() {
        let x = Var::constant((0..16).map(|v| v as f32).collect(), &[4, 4]);
        let y = resize_bilinear(&x, 2, 2);
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
