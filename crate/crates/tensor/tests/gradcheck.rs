//! Finite-difference checks for every differentiable op.

use nowcast_tensor::ops::{self, Conv3dSpec};
use nowcast_tensor::Var;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Compares d<f(xs), r>/d xs against central differences for each input.
fn check<F>(shapes: &[&[usize]], seed: u64, h: f32, tol: f32, f: F)
where
    F: Fn(&[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f32>> = shapes
        .iter()
        .map(|s| random(&mut rng, s.iter().product()))
        .collect();
    let leaves: Vec<Var> = inputs.iter().zip(shapes).map(|(d, s)| Var::leaf(d.clone(), s)).collect();
    let out = f(&leaves);
    let weights = random(&mut rng, out.numel());
    out.backward_with(weights.clone());

    let objective = |vals: &[Vec<f32>]| -> f64 {
        let vars: Vec<Var> = vals.iter().zip(shapes).map(|(d, s)| Var::constant(d.clone(), s)).collect();
        f(&vars)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };

    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().expect("leaf got no gradient");
        for i in 0..inputs[which].len() {
            let mut plus = inputs.clone();
            plus[which][i] += h;
            let mut minus = inputs.clone();
            minus[which][i] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
            let a = analytic[i] as f64;
            let err = (a - numeric).abs() / (1.0f64).max(a.abs()).max(numeric.abs());
            assert!(
                err < tol as f64,
                "input {} element {}: analytic {} numeric {} (err {})",
                which,
                i,
                a,
                numeric,
                err
            );
        }
    }
}

#[test]
fn matmul_all_transpose_modes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let b: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        check(&[a, b], 1, 1e-2, 1e-2, |v| ops::matmul_ex(&v[0], &v[1], ta, tb));
    }
}

#[test]
fn matmul_with_shared_rhs() {
    check(&[&[3, 2, 4], &[4, 3]], 2, 1e-2, 1e-2, |v| ops::matmul(&v[0], &v[1]));
}

#[test]
fn linear_with_bias() {
    check(&[&[2, 3, 4], &[5, 4], &[5]], 3, 1e-2, 1e-2, |v| ops::linear(&v[0], &v[1], Some(&v[2])));
}

#[test]
fn conv3d_padded_and_strided() {
    let spec = Conv3dSpec { stride: [1, 2, 1], padding: [1, 1, 0] };
    check(&[&[2, 2, 3, 5, 4], &[3, 2, 3, 3, 2], &[3]], 4, 1e-2, 1e-2, |v| {
        ops::conv3d(&v[0], &v[1], Some(&v[2]), spec)
    });
}

#[test]
fn conv2d_same_padding() {
    check(&[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]], 5, 1e-2, 1e-2, |v| {
        ops::conv2d(&v[0], &v[1], Some(&v[2]), [1, 1], [1, 1])
    });
}

#[test]
fn conv_transpose_kernel_equals_stride() {
    check(&[&[2, 3, 2, 2, 3], &[3, 2, 2, 1, 2], &[2]], 6, 1e-2, 1e-2, |v| {
        ops::conv_transpose3d(&v[0], &v[1], Some(&v[2]))
    });
}

#[test]
fn normalizations() {
    check(&[&[3, 6]], 7, 1e-2, 2e-2, |v| ops::softmax_last(&v[0]));
    check(&[&[4, 5], &[5], &[5]], 8, 1e-2, 2e-2, |v| ops::layer_norm(&v[0], &v[1], &v[2], 1e-5));
    check(&[&[2, 3, 2, 2, 2]], 9, 1e-2, 2e-2, |v| ops::instance_norm(&v[0], 1e-5));
    check(&[&[3, 2, 2, 2, 1]], 10, 1e-2, 2e-2, |v| ops::batch_norm(&v[0], 1e-5));
}

#[test]
fn elementwise_and_broadcast() {
    check(&[&[2, 3, 4], &[3, 1]], 11, 1e-2, 1e-2, |v| ops::mul(&v[0], &v[1]));
    check(&[&[2, 3, 4], &[4]], 12, 1e-2, 1e-2, |v| ops::sub(&v[0], &v[1]));
    check(&[&[1, 3, 1], &[2, 1, 4]], 13, 1e-2, 1e-2, |v| ops::add(&v[0], &v[1]));
    check(&[&[10]], 14, 1e-2, 1e-2, |v| ops::gelu(&v[0]));
    check(&[&[10]], 15, 1e-2, 1e-2, |v| ops::sigmoid(&v[0]));
    check(&[&[10]], 16, 1e-2, 1e-2, |v| ops::tanh(&v[0]));
}

#[test]
fn shape_ops() {
    check(&[&[2, 3, 4]], 17, 1e-2, 1e-2, |v| ops::permute(&v[0], &[1, 2, 0]));
    check(&[&[2, 3, 4]], 18, 1e-2, 1e-2, |v| ops::roll(&v[0], &[(1, 1), (2, -2)]));
    check(&[&[2, 5, 3]], 19, 1e-2, 1e-2, |v| ops::cumsum(&v[0], 1));
    check(&[&[2, 3]], 19, 1e-2, 1e-2, |v| ops::pad(&v[0], &[(1, 1), (0, 2)]));
    check(&[&[2, 3]], 20, 1e-2, 1e-2, |v| ops::repeat_interleave(&v[0], 1, 3));
    check(&[&[1, 2, 3, 5, 4]], 21, 1e-2, 1e-2, |v| ops::resize_bilinear(&v[0], 7, 3));
    check(&[&[1, 1, 2, 2, 2]], 22, 1e-2, 1e-2, |v| ops::upsample_nearest3d(&v[0], [1, 2, 2]));
}

#[test]
fn max_pool_routes_gradient_to_argmax() {
    let x = Var::leaf(vec![1.0, 5.0, 3.0, 2.0, 0.0, -1.0, 4.0, 7.0], &[1, 1, 1, 2, 4]);
    let y = ops::max_pool3d(&x, [1, 2, 2]);
    assert_eq!(y.data(), &[5.0, 7.0]);
    y.backward_with(vec![1.0, 2.0]);
    assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
}

/// Direct-summation convolution used as a forward-pass oracle.
fn naive_conv3d(x: &[f32], xs: [usize; 5], w: &[f32], ws: [usize; 5], spec: Conv3dSpec) -> Vec<f32> {
    let [n, c, d, h, wd] = xs;
    let [o, _, kd, kh, kw] = ws;
    let od = (d + 2 * spec.padding[0] - kd) / spec.stride[0] + 1;
    let oh = (h + 2 * spec.padding[1] - kh) / spec.stride[1] + 1;
    let ow = (wd + 2 * spec.padding[2] - kw) / spec.stride[2] + 1;
    let mut out = vec![0.0f32; n * o * od * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0f32;
                        for ic in 0..c {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let iz = (z * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                                        let iy = (y * spec.stride[1] + bb) as isize - spec.padding[1] as isize;
                                        let ix = (xx * spec.stride[2] + cc) as isize - spec.padding[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((b * c + ic) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((oc * c + ic) * kd + a) * kh + bb) * kw + cc;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((b * o + oc) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv3d_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for spec in [
        Conv3dSpec::same([3, 3, 3]),
        Conv3dSpec { stride: [2, 2, 2], padding: [0, 0, 0] },
        Conv3dSpec { stride: [1, 3, 2], padding: [2, 1, 1] },
    ] {
        let xs = [2, 3, 4, 7, 6];
        let ws = [4, 3, 3, 3, 3];
        let x = random(&mut rng, xs.iter().product());
        let w = random(&mut rng, ws.iter().product());
        let y = ops::conv3d(&Var::constant(x.clone(), &xs), &Var::constant(w.clone(), &ws), None, spec);
        let expected = naive_conv3d(&x, xs, &w, ws, spec);
        assert_eq!(y.numel(), expected.len());
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
