//! Probabilities to masks: thresholding, threshold sweeps and the
//! train/val climatology calibration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerWriter, DType};
use crate::data::{ClimatologyMap, ProbCube, RainCube};
use crate::error::{Error, Result};
use crate::metrics::IouCounts;

/// Regularizer in the calibration ratio; keeps dry pixels finite.
pub const CALIBRATION_DELTA: f64 = 1e-4;

/// 1 where `p > tau`.
pub fn apply_threshold(probs: &ProbCube, tau: f64) -> Result<RainCube> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config(format!("threshold must lie in (0, 1), got {}", tau)));
    }
    let mask = probs.values().iter().map(|&p| (p as f64 > tau) as u8).collect();
    RainCube::new(mask, probs.shape(), probs.meta.clone())
}

/// 0.2, 0.25, ..., 0.7
pub fn default_sweep_grid() -> Vec<f64> {
    (0..=10).map(|i| (20 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub best_tau: f64,
    pub best_iou: f64,
    /// `(tau, iou)` for every grid value, in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Pooled IoU over all cubes at each threshold of `grid`. Ties go to the
/// smaller threshold.
pub fn sweep_threshold(probs: &[ProbCube], gts: &[RainCube], grid: &[f64]) -> Result<SweepResult> {
    if probs.len() != gts.len() {
        return Err(Error::domain(format!("{} predictions for {} targets", probs.len(), gts.len())));
    }
    if grid.is_empty() {
        return Err(Error::config("empty threshold grid"));
    }
    let mut curve = Vec::with_capacity(grid.len());
    for &tau in grid {
        let mut counts = IouCounts::default();
        for (p, g) in probs.iter().zip(gts) {
            if p.shape() != g.shape() {
                return Err(Error::domain("prediction and target shapes differ"));
            }
            counts.add(IouCounts::of(apply_threshold(p, tau)?.values(), g.values())?);
        }
        curve.push((tau, counts.iou()));
    }
    let mut best = curve[0];
    for &(t, v) in &curve[1..] {
        if v > best.1 || (v == best.1 && t < best.0) {
            best = (t, v);
        }
    }
    Ok(SweepResult { best_tau: best.0, best_iou: best.1, curve })
}

/// How the two climatologies are turned into a multiplicative factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationForm {
    /// `(val + δ) / (train + δ)`
    #[default]
    Ratio,
    /// `1 + (val - train)`
    Difference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMask {
    /// Row-major `side × side`.
    pub factor: Vec<f64>,
    pub side: usize,
    pub clip_range: (f64, f64),
}

pub fn build_calibration(
    train: &ClimatologyMap,
    val: &ClimatologyMap,
    clip_range: (f64, f64),
    form: CalibrationForm,
) -> Result<CalibrationMask> {
    let (lo, hi) = clip_range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::config(format!("bad calibration clip range ({}, {})", lo, hi)));
    }
    if train.side != val.side || train.pixel_freq.len() != val.pixel_freq.len() {
        return Err(Error::domain(format!("climatology sides differ: {} vs {}", train.side, val.side)));
    }
    let factor = train
        .pixel_freq
        .iter()
        .zip(&val.pixel_freq)
        .map(|(&t, &v)| {
            let f = match form {
                CalibrationForm::Ratio => (v + CALIBRATION_DELTA) / (t + CALIBRATION_DELTA),
                CalibrationForm::Difference => 1.0 + (v - t),
            };
            f.clamp(lo, hi)
        })
        .collect();
    Ok(CalibrationMask { factor, side: train.side, clip_range })
}

/// `min(1, p · factor)`, the factor broadcast over time.
pub fn apply_calibration(probs: &ProbCube, mask: &CalibrationMask) -> Result<ProbCube> {
    let [t, h, w] = probs.shape();
    if h != mask.side || w != mask.side {
        return Err(Error::domain(format!("calibration side {} does not match {}x{}", mask.side, h, w)));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(t * plane);
    for slot in probs.values().chunks(plane) {
        out.extend(slot.iter().zip(&mask.factor).map(|(&p, &f)| (p as f64 * f).min(1.0) as f32));
    }
    ProbCube::new(out, probs.shape(), probs.meta.clone())
}

/// Adds (or replaces) the calibration mask inside a dataset container.
pub fn store_calibration(path: &Path, mask: &CalibrationMask) -> Result<()> {
    let mut w = ContainerWriter::from_container(&Container::open(path)?)?;
    let factor: Vec<f32> = mask.factor.iter().map(|&v| v as f32).collect();
    w.add_f32("calibration", &[mask.side, mask.side], factor, DType::F32)?
        .dataset_attr("calibration", "clip_lo", mask.clip_range.0)?
        .dataset_attr("calibration", "clip_hi", mask.clip_range.1)?;
    w.write(path)
}

pub fn load_calibration(path: &Path) -> Result<Option<CalibrationMask>> {
    let c = Container::open(path)?;
    let Some(info) = c.dataset("calibration") else {
        return Ok(None);
    };
    let clip = |k: &str| {
        info.attrs.get(k).and_then(|v| v.as_f64()).ok_or_else(|| Error::format(format!("calibration lacks '{}'", k)))
    };
    let clip_range = (clip("clip_lo")?, clip("clip_hi")?);
    let side = info.shape[0];
    let factor = c.read_f32("calibration")?.into_iter().map(|v| v as f64).collect();
    Ok(Some(CalibrationMask { factor, side, clip_range }))
}
