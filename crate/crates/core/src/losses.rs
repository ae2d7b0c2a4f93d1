//! Training objectives over rain probabilities.
//!
//! The probability-space functions work in `f64` and clamp probabilities to
//! `[1e-7, 1 - 1e-7]` before taking logs. [`value_and_logit_grad`] is the
//! form the training loop uses: it takes raw logits and returns the loss with
//! its gradient, using log-sigmoid identities for the log terms.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    SoftIou,
    Dice,
    Focal,
    #[default]
    DiceFocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub pos_weight: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Weight of the Dice term in `dice_focal`.
    pub mix_weight: f64,
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: LossKind::DiceFocal, pos_weight: 1.0, focal_gamma: 2.0, focal_alpha: 0.25, mix_weight: 0.5, smooth: 1.0 }
    }
}

impl LossConfig {
    pub fn of(kind: LossKind) -> Self {
        LossConfig { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::config(format!("loss {} out of range: {}", what, v)));
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return bad("pos_weight", self.pos_weight);
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return bad("focal_gamma", self.focal_gamma);
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return bad("focal_alpha", self.focal_alpha);
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return bad("mix_weight", self.mix_weight);
        }
        if !(self.smooth > 0.0 && self.smooth.is_finite()) {
            return bad("smooth", self.smooth);
        }
        Ok(())
    }
}

fn check(probs_len: usize, target: &[u8]) -> Result<()> {
    if probs_len != target.len() {
        return Err(Error::domain(format!("prediction has {} values, target {}", probs_len, target.len())));
    }
    if probs_len == 0 {
        return Err(Error::domain("loss of an empty tensor"));
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn bce_weighted(probs: &[f64], target: &[u8], pos_weight: f64) -> Result<f64> {
    check(probs.len(), target)?;
    let s: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clamp(p);
            let y = y as f64;
            -(pos_weight * y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / probs.len() as f64)
}

fn sums(probs: &[f64], target: &[u8]) -> (f64, f64, f64, f64) {
    let (mut py, mut p, mut y, mut p2) = (0.0, 0.0, 0.0, 0.0);
    for (&pi, &yi) in probs.iter().zip(target) {
        let yi = yi as f64;
        py += pi * yi;
        p += pi;
        y += yi;
        p2 += pi * pi;
    }
    (py, p, y, p2)
}

pub fn soft_iou_loss(probs: &[f64], target: &[u8], smooth: f64) -> Result<f64> {
    check(probs.len(), target)?;
    let (i, p, y, _) = sums(probs, target);
    Ok(1.0 - (i + smooth) / (p + y - i + smooth))
}

/// Gradient of [`soft_iou_loss`] with respect to each probability.
pub fn soft_iou_grad(probs: &[f64], target: &[u8], smooth: f64) -> Result<Vec<f64>> {
    check(probs.len(), target)?;
    let (i, p, y, _) = sums(probs, target);
    let num = i + smooth;
    let den = p + y - i + smooth;
    // d(num/den)/dp_k = (y_k·den - num·(1 - y_k)) / den²
    Ok(target.iter().map(|&yk| {
        let yk = yk as f64;
        -(yk * den - num * (1.0 - yk)) / (den * den)
    }).collect())
}

pub fn dice_loss(probs: &[f64], target: &[u8], smooth: f64) -> Result<f64> {
    check(probs.len(), target)?;
    let (i, _, y, p2) = sums(probs, target);
    // y is binary so Σy² = Σy
    Ok(1.0 - (2.0 * i + smooth) / (p2 + y + smooth))
}

/// Gradient of [`dice_loss`] with respect to each probability.
pub fn dice_grad(probs: &[f64], target: &[u8], smooth: f64) -> Result<Vec<f64>> {
    check(probs.len(), target)?;
    let (i, _, y, p2) = sums(probs, target);
    let num = 2.0 * i + smooth;
    let den = p2 + y + smooth;
    Ok(probs.iter().zip(target).map(|(&pk, &yk)| {
        -(2.0 * yk as f64 * den - num * 2.0 * pk) / (den * den)
    }).collect())
}

pub fn focal_loss(probs: &[f64], target: &[u8], gamma: f64, alpha: f64) -> Result<f64> {
    check(probs.len(), target)?;
    let s: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clamp(p);
            let (pt, at) = if y == 1 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            -at * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    Ok(s / probs.len() as f64)
}

pub fn dice_focal(probs: &[f64], target: &[u8], cfg: &LossConfig) -> Result<f64> {
    let d = dice_loss(probs, target, cfg.smooth)?;
    let f = focal_loss(probs, target, cfg.focal_gamma, cfg.focal_alpha)?;
    Ok(cfg.mix_weight * d + (1.0 - cfg.mix_weight) * f)
}

/// Loss selected by `cfg.kind`, on probabilities.
pub fn loss_value(probs: &[f64], target: &[u8], cfg: &LossConfig) -> Result<f64> {
    match cfg.kind {
        LossKind::Bce => bce_weighted(probs, target, cfg.pos_weight),
        LossKind::SoftIou => soft_iou_loss(probs, target, cfg.smooth),
        LossKind::Dice => dice_loss(probs, target, cfg.smooth),
        LossKind::Focal => focal_loss(probs, target, cfg.focal_gamma, cfg.focal_alpha),
        LossKind::DiceFocal => dice_focal(probs, target, cfg),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean focal loss on logits and its gradient, added into `grad` scaled by `w`.
fn focal_logits(x: &[f64], target: &[u8], gamma: f64, alpha: f64, w: f64, grad: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mut total = 0.0;
    for ((&xi, &y), g) in x.iter().zip(target).zip(grad.iter_mut()) {
        let p = sigmoid(xi);
        if y == 1 {
            let logp = -softplus(-xi);
            let q = 1.0 - p;
            total += -alpha * q.powf(gamma) * logp;
            *g += w * alpha * (gamma * q.powf(gamma) * p * logp - q.powf(gamma + 1.0)) / n;
        } else {
            let log1p = -softplus(xi);
            total += -(1.0 - alpha) * p.powf(gamma) * log1p;
            *g += w * -(1.0 - alpha) * (gamma * p.powf(gamma) * (1.0 - p) * log1p - p.powf(gamma + 1.0)) / n;
        }
    }
    total / n
}

/// Loss and its gradient with respect to the logits `x` (probabilities are
/// `sigmoid(x)`).
pub fn value_and_logit_grad(logits: &[f32], target: &[u8], cfg: &LossConfig) -> Result<(f64, Vec<f32>)> {
    check(logits.len(), target)?;
    let x: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let n = x.len() as f64;
    let mut grad = vec![0.0f64; x.len()];
    let region_term = |w: f64, grad: &mut [f64], iou: bool| -> Result<f64> {
        let p: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
        let (v, gp) = if iou {
            (soft_iou_loss(&p, target, cfg.smooth)?, soft_iou_grad(&p, target, cfg.smooth)?)
        } else {
            (dice_loss(&p, target, cfg.smooth)?, dice_grad(&p, target, cfg.smooth)?)
        };
        for ((g, &pk), gk) in grad.iter_mut().zip(&p).zip(gp) {
            *g += w * gk * pk * (1.0 - pk);
        }
        Ok(v)
    };
    let value = match cfg.kind {
        LossKind::Bce => {
            let w = cfg.pos_weight;
            let mut total = 0.0;
            for ((&xi, &y), g) in x.iter().zip(target).zip(grad.iter_mut()) {
                let y = y as f64;
                total += w * y * softplus(-xi) + (1.0 - y) * softplus(xi);
                let p = sigmoid(xi);
                *g = ((1.0 - y) * p - w * y * (1.0 - p)) / n;
            }
            total / n
        }
        LossKind::SoftIou => region_term(1.0, &mut grad, true)?,
        LossKind::Dice => region_term(1.0, &mut grad, false)?,
        LossKind::Focal => focal_logits(&x, target, cfg.focal_gamma, cfg.focal_alpha, 1.0, &mut grad),
        LossKind::DiceFocal => {
            let m = cfg.mix_weight;
            let d = region_term(m, &mut grad, false)?;
            let f = focal_logits(&x, target, cfg.focal_gamma, cfg.focal_alpha, 1.0 - m, &mut grad);
            m * d + (1.0 - m) * f
        }
    };
    Ok((value, grad.into_iter().map(|g| g as f32).collect()))
}

/// Negative-to-positive pixel ratio over all targets.
pub fn pos_weight_from_counts(positives: u64, negatives: u64) -> Result<f64> {
    if positives == 0 {
        return Err(Error::domain("no positive pixels: pos_weight is undefined"));
    }
    if negatives == 0 {
        return Err(Error::domain("no negative pixels: pos_weight would be zero"));
    }
    Ok(negatives as f64 / positives as f64)
}

pub fn pos_weight_from_dataset(dataset: &Dataset) -> Result<f64> {
    let (mut pos, mut total) = (0u64, 0u64);
    for s in &dataset.samples {
        let v = s.target.values();
        pos += v.iter().map(|&b| b as u64).sum::<u64>();
        total += v.len() as u64;
    }
    pos_weight_from_counts(pos, total - pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn random_case(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let y = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        (p, y)
    }

    #[test]
    fn bce_examples() {
        let y = [1u8, 0, 1, 0];
        let exact: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        assert!(bce_weighted(&exact, &y, 3.0).unwrap() <= 1e-5);
        assert!((bce_weighted(&[0.5; 4], &y, 1.0).unwrap() - LN_2).abs() < 1e-12);
        assert!((bce_weighted(&[0.5], &[1], 2.0).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        assert!(matches!(bce_weighted(&[0.5], &[1, 0], 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn soft_iou_examples() {
        let y = [1u8, 1, 0, 1];
        assert!(soft_iou_loss(&[1.0, 1.0, 0.0, 1.0], &y, 1e-9).unwrap() < 1e-9);
        let eps = 1.0;
        assert!((soft_iou_loss(&[0.0; 4], &y, eps).unwrap() - (1.0 - eps / (3.0 + eps))).abs() < 1e-15);
        assert_eq!(soft_iou_loss(&[0.0; 4], &[0; 4], eps).unwrap(), 0.0);
    }

    #[test]
    fn dice_examples() {
        let y = [1u8, 1, 0, 0];
        assert!(dice_loss(&[1.0, 1.0, 0.0, 0.0], &y, 1e-9).unwrap() < 1e-9);
        let v = dice_loss(&[0.5; 4], &y, 1e-12).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(dice_loss(&[0.0; 4], &[0; 4], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn focal_examples() {
        let (p, y) = random_case(3, 25);
        let f = focal_loss(&p, &y, 0.0, 0.5).unwrap();
        let b = bce_weighted(&p, &y, 1.0).unwrap();
        assert!((f - 0.5 * b).abs() < 1e-7);
        assert!(focal_loss(&[1.0, 0.0], &[1, 0], 2.0, 0.25).unwrap() <= 1e-5);
        let v = focal_loss(&[0.5; 6], &[1, 0, 1, 0, 0, 1], 2.0, 0.5).unwrap();
        assert!((v - 0.5 * 0.25 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn dice_focal_mixes() {
        let (p, y) = random_case(5, 16);
        let mut cfg = LossConfig::default();
        let d = dice_loss(&p, &y, cfg.smooth).unwrap();
        let f = focal_loss(&p, &y, cfg.focal_gamma, cfg.focal_alpha).unwrap();
        cfg.mix_weight = 1.0;
        assert_eq!(dice_focal(&p, &y, &cfg).unwrap(), d);
        cfg.mix_weight = 0.0;
        assert_eq!(dice_focal(&p, &y, &cfg).unwrap(), f);
        cfg.mix_weight = 0.5;
        assert!((dice_focal(&p, &y, &cfg).unwrap() - (d + f) / 2.0).abs() < 1e-12);
    }

    fn max_rel_err(analytic: &[f64], f: impl Fn(&[f64]) -> f64, p: &[f64]) -> f64 {
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for k in 0..p.len() {
            let mut a = p.to_vec();
            let mut b = p.to_vec();
            a[k] += h;
            b[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-8);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn region_gradients_match_finite_differences() {
        for seed in 0..20 {
            let (p, y) = random_case(seed, 25);
            let g = soft_iou_grad(&p, &y, 1.0).unwrap();
            assert!(max_rel_err(&g, |q| soft_iou_loss(q, &y, 1.0).unwrap(), &p) <= 1e-4);
            let g = dice_grad(&p, &y, 1.0).unwrap();
            assert!(max_rel_err(&g, |q| dice_loss(q, &y, 1.0).unwrap(), &p) <= 1e-4);
        }
    }

    #[test]
    fn logit_form_matches_probability_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f32> = (0..30).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y: Vec<u8> = (0..30).map(|_| rng.random_range(0..2u8)).collect();
        let p: Vec<f64> = x.iter().map(|&v| sigmoid(v as f64)).collect();
        for kind in [LossKind::Bce, LossKind::SoftIou, LossKind::Dice, LossKind::Focal, LossKind::DiceFocal] {
            let cfg = LossConfig { kind, pos_weight: 2.5, ..Default::default() };
            let (v, g) = value_and_logit_grad(&x, &y, &cfg).unwrap();
            assert!((v - loss_value(&p, &y, &cfg).unwrap()).abs() < 1e-6, "{:?}", kind);
            let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let gd: Vec<f64> = g.iter().map(|&v| v as f64).collect();
            let f = |q: &[f64]| {
                let pq: Vec<f64> = q.iter().map(|&v| sigmoid(v)).collect();
                loss_value(&pq, &y, &cfg).unwrap()
            };
            // f32 gradient output bounds the achievable precision.
            assert!(max_rel_err(&gd, f, &xd) < 1e-3, "{:?}", kind);
        }
    }

    #[test]
    fn pos_weight_examples() {
        assert_eq!(pos_weight_from_counts(50, 50).unwrap(), 1.0);
        assert_eq!(pos_weight_from_counts(1, 99).unwrap(), 99.0);
        assert!(pos_weight_from_counts(100, 0).is_err());
        assert!(pos_weight_from_counts(0, 100).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { mix_weight: 1.5, ..Default::default() };
        assert!(bad.validate().unwrap_err().is_config());
        let bad = LossConfig { smooth: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn losses_are_non_negative_and_permutation_invariant(seed in any::<u64>(), rot in 0usize..16) {
            let (p, y) = random_case(seed, 16);
            let mut pr = p.clone();
            let mut yr = y.clone();
            pr.rotate_left(rot);
            yr.rotate_left(rot);
            for kind in [LossKind::Bce, LossKind::SoftIou, LossKind::Dice, LossKind::Focal, LossKind::DiceFocal] {
                let cfg = LossConfig::of(kind);
                let a = loss_value(&p, &y, &cfg).unwrap();
                let b = loss_value(&pr, &yr, &cfg).unwrap();
                prop_assert!(a >= 0.0);
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn dice_focal_is_a_convex_combination(seed in any::<u64>(), w in 0.0f64..=1.0) {
            let (p, y) = random_case(seed, 16);
            let cfg = LossConfig { mix_weight: w, ..Default::default() };
            let d = dice_loss(&p, &y, cfg.smooth).unwrap();
            let f = focal_loss(&p, &y, cfg.focal_gamma, cfg.focal_alpha).unwrap();
            prop_assert!((dice_focal(&p, &y, &cfg).unwrap() - (w * d + (1.0 - w) * f)).abs() < 1e-9);
        }
    }
}
