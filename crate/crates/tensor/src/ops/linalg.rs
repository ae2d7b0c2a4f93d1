use crate::var::Var;

/// Row/column strides of a logical matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout { rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Layout { rs: self.cs, cs: self.rs }
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows as isize - 1) as usize * self.rs as usize + (cols as isize - 1) as usize * self.cs as usize
    }
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[i * lc.rs as usize + j * lc.cs as usize] = 0.0;
                }
            }
        }
        return;
    }
    assert!(la.max_offset(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(lb.max_offset(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.max_offset(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: every address touched by the kernel lies inside the slices, checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

/// Batched matrix product `op(a) · op(b)` where `op` optionally transposes
/// the two trailing axes. `b` may be rank 2, in which case it is shared
/// across every batch entry of `a`.
pub fn matmul_ex(a: &Var, b: &Var, trans_a: bool, trans_b: bool) -> Var {
    assert!(a.rank() >= 2 && b.rank() >= 2, "matmul needs rank >= 2");
    let ra = a.rank();
    let rb = b.rank();
    let (ar, ac) = (a.dim(ra - 2), a.dim(ra - 1));
    let (br, bc) = (b.dim(rb - 2), b.dim(rb - 1));
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?}", a.shape(), b.shape());
    let batch_shape = &a.shape()[..ra - 2];
    let batch: usize = batch_shape.iter().product();
    let shared_b = rb == 2;
    if !shared_b {
        assert_eq!(&b.shape()[..rb - 2], batch_shape, "matmul batch dims differ");
    }
    let la = if trans_a { Layout::row_major(ac).t() } else { Layout::row_major(ac) };
    let lb = if trans_b { Layout::row_major(bc).t() } else { Layout::row_major(bc) };
    let (a_sz, b_sz, c_sz) = (ar * ac, br * bc, m * n);
    let mut out = vec![0.0f32; batch * c_sz];
    for i in 0..batch {
        let bo = if shared_b { 0 } else { i * b_sz };
        gemm(
            m,
            k,
            n,
            &a.data()[i * a_sz..(i + 1) * a_sz],
            la,
            &b.data()[bo..bo + b_sz],
            lb,
            0.0,
            &mut out[i * c_sz..(i + 1) * c_sz],
            Layout::row_major(n),
        );
    }
    let mut shape = batch_shape.to_vec();
    shape.extend([m, n]);
    let (av, bv) = (a.clone(), b.clone());
    Var::from_op(out, shape, vec![a.clone(), b.clone()], move |g| {
        let lc = Layout::row_major(n);
        let ga = av.requires_grad().then(|| {
            // d op(a) = g · op(b)^T, written through op(a)'s layout
            let mut ga = vec![0.0f32; av.numel()];
            for i in 0..batch {
                let bo = if shared_b { 0 } else { i * b_sz };
                gemm(
                    m,
                    n,
                    k,
                    &g[i * c_sz..(i + 1) * c_sz],
                    lc,
                    &bv.data()[bo..bo + b_sz],
                    lb.t(),
                    0.0,
                    &mut ga[i * a_sz..(i + 1) * a_sz],
                    la,
                );
            }
            ga
        });
        let gb = bv.requires_grad().then(|| {
            // d op(b) = op(a)^T · g
            let mut gb = vec![0.0f32; bv.numel()];
            for i in 0..batch {
                let bo = if shared_b { 0 } else { i * b_sz };
                let beta = if shared_b && i > 0 { 1.0 } else { 0.0 };
                gemm(
                    k,
                    m,
                    n,
                    &av.data()[i * a_sz..(i + 1) * a_sz],
                    la.t(),
                    &g[i * c_sz..(i + 1) * c_sz],
                    lc,
                    beta,
                    &mut gb[bo..bo + b_sz],
                    lb,
                );
            }
            gb
        });
        vec![ga, gb]
    })
}

pub fn matmul(a: &Var, b: &Var) -> Var {
    matmul_ex(a, b, false, false)
}

/// Affine map over the last axis: `x · wᵀ + bias`, with `w` shaped
/// `(out, in)`.
pub fn linear(x: &Var, w: &Var, bias: Option<&Var>) -> Var {
    assert_eq!(w.rank(), 2);
    let (out_f, in_f) = (w.dim(0), w.dim(1));
    let last = *x.shape().last().expect("linear on scalar");
    assert_eq!(last, in_f, "linear: input features {} != weight {}", last, in_f);
    let rows = x.numel() / in_f;
    let mut out = vec![0.0f32; rows * out_f];
    if let Some(b) = bias {
        assert_eq!(b.shape(), &[out_f]);
        for r in 0..rows {
            out[r * out_f..(r + 1) * out_f].copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(
        rows,
        in_f,
        out_f,
        x.data(),
        Layout::row_major(in_f),
        w.data(),
        Layout::row_major(in_f).t(),
        beta,
        &mut out,
        Layout::row_major(out_f),
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (xv, wv) = (x.clone(), w.clone());
    let has_bias = bias.is_some();
    let bias_grad = bias.map(|b| b.requires_grad()).unwrap_or(false);
    Var::from_op(out, shape, parents, move |g| {
        let gx = xv.requires_grad().then(|| {
            let mut gx = vec![0.0f32; rows * in_f];
            gemm(
                rows,
                out_f,
                in_f,
                g,
                Layout::row_major(out_f),
                wv.data(),
                Layout::row_major(in_f),
                0.0,
                &mut gx,
                Layout::row_major(in_f),
            );
            gx
        });
        let gw = wv.requires_grad().then(|| {
            let mut gw = vec![0.0f32; out_f * in_f];
            gemm(
                out_f,
                rows,
                in_f,
                g,
                Layout::row_major(out_f).t(),
                xv.data(),
                Layout::row_major(in_f),
                0.0,
                &mut gw,
                Layout::row_major(in_f),
            );
            gw
        });
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(bias_grad.then(|| {
                let mut gb = vec![0.0f32; out_f];
                for row in g.chunks_exact(out_f) {
                    for (a, b) in gb.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                gb
            }));
        }
        grads
    })
}
