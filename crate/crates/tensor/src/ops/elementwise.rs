use rand::Rng;
use rand::RngCore;

use crate::var::{numel, Var};

fn unary<F, D>(x: &Var, f: F, df: D) -> Var
where
    F: Fn(f32) -> f32,
    D: Fn(f32, f32) -> f32 + 'static,
{
    let out: Vec<f32> = x.data().iter().map(|&v| f(v)).collect();
    let xs = x.clone();
    let shape = x.shape().to_vec();
    if !x.requires_grad() {
        return Var::constant(out, &shape);
    }
    let out = std::rc::Rc::new(out);
    let ys = out.clone();
    Var::from_shared(out, shape, vec![x.clone()], move |g| {
        let grad = g
            .iter()
            .zip(xs.data())
            .zip(ys.iter())
            .map(|((g, &xv), &yv)| g * df(xv, yv))
            .collect();
        vec![Some(grad)]
    })
}

pub fn scale(x: &Var, c: f32) -> Var {
    unary(x, |v| v * c, move |_, _| c)
}

pub fn add_scalar(x: &Var, c: f32) -> Var {
    unary(x, |v| v + c, |_, _| 1.0)
}

pub fn neg(x: &Var) -> Var {
    scale(x, -1.0)
}

pub fn relu(x: &Var) -> Var {
    unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn leaky_relu(x: &Var, slope: f32) -> Var {
    unary(
        x,
        |v| if v >= 0.0 { v } else { v * slope },
        move |x, _| if x >= 0.0 { 1.0 } else { slope },
    )
}

/// Randomized leaky ReLU. With an RNG (training) each negative element gets a
/// slope drawn uniformly from `[lower, upper]`; without one the fixed slope
/// `(lower + upper) / 2` is used.
pub fn rrelu(x: &Var, lower: f32, upper: f32, rng: Option<&mut dyn RngCore>) -> Var {
    let Some(rng) = rng else {
        return leaky_relu(x, 0.5 * (lower + upper));
    };
    let slopes: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { 1.0 } else { rng.random_range(lower..=upper) })
        .collect();
    let out: Vec<f32> = x.data().iter().zip(&slopes).map(|(v, s)| v * s).collect();
    Var::from_op(out, x.shape().to_vec(), vec![x.clone()], move |g| {
        vec![Some(g.iter().zip(&slopes).map(|(g, s)| g * s).collect())]
    })
}

pub fn sigmoid(x: &Var) -> Var {
    unary(x, sigmoid_f32, |_, y| y * (1.0 - y))
}

pub fn sigmoid_f32(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn tanh(x: &Var) -> Var {
    unary(x, f32::tanh, |_, y| 1.0 - y * y)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: &Var) -> Var {
    unary(
        x,
        |v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
        |v, _| {
            let inner = GELU_C * (v + 0.044715 * v * v * v);
            let t = inner.tanh();
            let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        },
    )
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let inner = if rank == 0 { 1 } else { out[rank - 1] };
    let (ia_step, ib_step) = if rank == 0 { (0, 0) } else { (sa[rank - 1], sb[rank - 1]) };
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for k in 0..inner {
            f(o + k, ia + k * ia_step, ib + k * ib_step);
        }
        o += inner;
        if rank < 2 {
            break;
        }
        // advance the outer multi-index
        let mut axis = rank - 2;
        loop {
            idx[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            ia -= sa[axis] * out[axis];
            ib -= sb[axis] * out[axis];
            idx[axis] = 0;
            if axis == 0 {
                break;
            }
            axis -= 1;
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

fn binary(a: &Var, b: &Var, op: BinOp) -> Var {
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let apply = |x: f32, y: f32| match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
    };
    let same = a.shape() == b.shape();
    let out: Vec<f32> = if same {
        a.data().iter().zip(b.data()).map(|(&x, &y)| apply(x, y)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut out = vec![0.0; numel(&out_shape)];
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = apply(ad[i], bd[j]));
        out
    };
    let (av, bv) = (a.clone(), b.clone());
    let shape = out_shape.clone();
    Var::from_op(out, out_shape, vec![a.clone(), b.clone()], move |g| {
        let need_a = av.requires_grad();
        let need_b = bv.requires_grad();
        if same {
            let ga = need_a.then(|| match op {
                BinOp::Add | BinOp::Sub => g.to_vec(),
                BinOp::Mul => g.iter().zip(bv.data()).map(|(g, y)| g * y).collect(),
            });
            let gb = need_b.then(|| match op {
                BinOp::Add => g.to_vec(),
                BinOp::Sub => g.iter().map(|g| -g).collect(),
                BinOp::Mul => g.iter().zip(av.data()).map(|(g, x)| g * x).collect(),
            });
            return vec![ga, gb];
        }
        let sa = broadcast_strides(av.shape(), &shape);
        let sb = broadcast_strides(bv.shape(), &shape);
        let mut ga = need_a.then(|| vec![0.0f32; av.numel()]);
        let mut gb = need_b.then(|| vec![0.0f32; bv.numel()]);
        let (ad, bd) = (av.data(), bv.data());
        for_each_broadcast(&shape, &sa, &sb, |o, i, j| {
            let go = g[o];
            if let Some(ga) = ga.as_mut() {
                ga[i] += match op {
                    BinOp::Add | BinOp::Sub => go,
                    BinOp::Mul => go * bd[j],
                };
            }
            if let Some(gb) = gb.as_mut() {
                gb[j] += match op {
                    BinOp::Add => go,
                    BinOp::Sub => -go,
                    BinOp::Mul => go * ad[i],
                };
            }
        });
        vec![ga, gb]
    })
}

/// Elementwise sum with numpy-style broadcasting.
pub fn add(a: &Var, b: &Var) -> Var {
    binary(a, b, BinOp::Add)
}

pub fn sub(a: &Var, b: &Var) -> Var {
    binary(a, b, BinOp::Sub)
}

pub fn mul(a: &Var, b: &Var) -> Var {
    binary(a, b, BinOp::Mul)
}

/// Sum of all elements, as a one-element array.
pub fn sum_all(x: &Var) -> Var {
    let s: f32 = x.data().iter().sum();
    let n = x.numel();
    Var::from_op(vec![s], vec![1], vec![x.clone()], move |g| vec![Some(vec![g[0]; n])])
}

pub fn mean_all(x: &Var) -> Var {
    scale(&sum_all(x), 1.0 / x.numel() as f32)
}
