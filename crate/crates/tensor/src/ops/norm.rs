use crate::ops::{add, mul, permute, reshape};
use crate::var::Var;

/// Softmax over the last axis.
pub fn softmax_last(x: &Var) -> Var {
    let n = *x.shape().last().expect("softmax on scalar");
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(n) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if m == f32::NEG_INFINITY {
            // fully masked row
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    let out = std::rc::Rc::new(out);
    let y = out.clone();
    Var::from_shared(out, x.shape().to_vec(), vec![x.clone()], move |g| {
        let mut gx = vec![0.0f32; g.len()];
        for ((gr, yr), gxr) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
            let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
            for ((o, &gv), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                *o = yv * (gv - dot);
            }
        }
        vec![Some(gx)]
    })
}

/// Standardizes each contiguous run of `row_len` elements to zero mean and
/// unit variance (biased variance, `eps` inside the root).
pub fn normalize_rows(x: &Var, row_len: usize, eps: f32) -> Var {
    assert!(row_len > 0 && x.numel() % row_len == 0, "row length does not tile the array");
    let rows = x.numel() / row_len;
    let mut out = vec![0.0f32; x.numel()];
    let mut inv_std = vec![0.0f32; rows];
    for (r, (xr, yr)) in x.data().chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)).enumerate() {
        let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / row_len as f64;
        let var = xr.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / row_len as f64;
        let is = 1.0 / (var + eps as f64).sqrt();
        inv_std[r] = is as f32;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = ((v as f64 - mean) * is) as f32;
        }
    }
    let out = std::rc::Rc::new(out);
    let y = out.clone();
    Var::from_shared(out, x.shape().to_vec(), vec![x.clone()], move |g| {
        let mut gx = vec![0.0f32; g.len()];
        let nf = row_len as f32;
        for (r, ((gr, yr), gxr)) in g
            .chunks_exact(row_len)
            .zip(y.chunks_exact(row_len))
            .zip(gx.chunks_exact_mut(row_len))
            .enumerate()
        {
            let mg: f32 = gr.iter().sum::<f32>() / nf;
            let mgy: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / nf;
            for ((o, &gv), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                *o = inv_std[r] * (gv - mg - yv * mgy);
            }
        }
        vec![Some(gx)]
    })
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Var, gamma: &Var, beta: &Var, eps: f32) -> Var {
    let c = *x.shape().last().unwrap();
    let y = normalize_rows(x, c, eps);
    add(&mul(&y, gamma), beta)
}

/// Instance normalization for `(N, C, spatial...)`: every (sample, channel)
/// plane is standardized on its own.
pub fn instance_norm(x: &Var, eps: f32) -> Var {
    assert!(x.rank() >= 3);
    let spatial: usize = x.shape()[2..].iter().product();
    normalize_rows(x, spatial, eps)
}

/// Batch normalization with batch statistics (per channel over batch and
/// spatial axes), no affine.
pub fn batch_norm(x: &Var, eps: f32) -> Var {
    assert!(x.rank() >= 2);
    let shape = x.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let t = permute(&reshape(x, &[n, c, spatial]), &[1, 0, 2]);
    let y = normalize_rows(&t, n * spatial, eps);
    reshape(&permute(&y, &[1, 0, 2]), &shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Var::constant(vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0], &[2, 3]);
        let y = softmax_last(&x);
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_entries_get_zero_weight() {
        let x = Var::constant(vec![0.0, f32::NEG_INFINITY, 0.0], &[1, 3]);
        let y = softmax_last(&x);
        assert_eq!(y.data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let x = Var::constant((0..12).map(|v| (v * v) as f32).collect(), &[3, 4]);
        let y = normalize_rows(&x, 4, 0.0);
        for row in y.data().chunks(4) {
            let m: f32 = row.iter().sum::<f32>() / 4.0;
            let v: f32 = row.iter().map(|a| (a - m) * (a - m)).sum::<f32>() / 4.0;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-4);
        }
    }
}
