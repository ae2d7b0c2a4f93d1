//! Outputs as per-step increments: `t'_0 = t_0`, `t'_i = t'_{i-1} + t_i`.

use nowcast_tensor::ops;
use nowcast_tensor::Var;

/// Cumulative sum over the leading `steps` axis of a `(steps, plane)`
/// buffer in f64.
pub fn temporal_shift(deltas: &[f64], steps: usize) -> Vec<f64> {
    assert!(steps > 0 && deltas.len() % steps == 0, "buffer is not (steps, plane)");
    let plane = deltas.len() / steps;
    let mut out = deltas.to_vec();
    for t in 1..steps {
        let (prev, cur) = out.split_at_mut(t * plane);
        for (c, p) in cur[..plane].iter_mut().zip(&prev[(t - 1) * plane..]) {
            *c += *p;
        }
    }
    out
}

/// Logits `(B, T, H, W)` accumulated along the time axis.
pub fn temporal_shift_logits(logits: &Var) -> Var {
    ops::cumsum(logits, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_increments_hold_the_first_value() {
        let mut d = vec![0.0; 32];
        d[0] = 1.25;
        assert!(temporal_shift(&d, 32).iter().all(|&v| v == 1.25));
    }

    #[test]
    fn constant_increments_give_a_progression() {
        let (t0, c) = (0.5, 0.25);
        let mut d = vec![c; 32];
        d[0] = t0;
        let out = temporal_shift(&d, 32);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, t0 + i as f64 * c);
        }
    }

    #[test]
    fn last_step_is_the_total() {
        let d: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = temporal_shift(&d, 32);
        let total: f64 = d.iter().sum();
        assert!((out[31] - total).abs() < 1e-12);
    }

    #[test]
    fn planes_are_accumulated_independently() {
        // (3 steps, 2 pixels)
        let out = temporal_shift(&[1.0, 10.0, 2.0, 20.0, 3.0, 30.0], 3);
        assert_eq!(out, vec![1.0, 10.0, 3.0, 30.0, 6.0, 60.0]);
    }

    #[test]
    fn var_version_matches() {
        let d: Vec<f32> = (0..2 * 4 * 3).map(|i| i as f32 * 0.5 - 3.0).collect();
        let v = temporal_shift_logits(&Var::constant(d.clone(), &[2, 4, 3, 1]));
        for b in 0..2 {
            let chunk: Vec<f64> = d[b * 12..(b + 1) * 12].iter().map(|&x| x as f64).collect();
            let want = temporal_shift(&chunk, 4);
            for (g, w) in v.data()[b * 12..(b + 1) * 12].iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn linear(x in prop::collection::vec(-5.0f64..5.0, 32), y in prop::collection::vec(-5.0f64..5.0, 32),
                  a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = temporal_shift(&mix, 32);
            let (sx, sy) = (temporal_shift(&x, 32), temporal_shift(&y, 32));
            for i in 0..32 {
                prop_assert!((lhs[i] - (a * sx[i] + b * sy[i])).abs() < 1e-9);
            }
        }
    }
}
