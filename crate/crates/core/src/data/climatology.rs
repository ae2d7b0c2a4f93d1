use serde::{Deserialize, Serialize};

use crate::data::types::{Dataset, Split};
use crate::error::{Error, Result};

/// Long-run rain statistics of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimatologyMap {
    /// Fraction of (sample, time) slots that are rainy, per pixel, row-major
    /// `side × side`.
    pub pixel_freq: Vec<f64>,
    pub side: usize,
    /// Mean over samples of each sample's rain ratio.
    pub scalar_mean: f64,
    /// Largest per-sample rain ratio.
    pub scalar_max: f64,
    pub split: Split,
    pub region_id: String,
    pub year: i32,
}

pub fn compute_climatology(dataset: &Dataset, split: Split) -> Result<ClimatologyMap> {
    if dataset.is_empty() {
        return Err(Error::domain("climatology of an empty dataset"));
    }
    let side = dataset.grid.side;
    let plane = side * side;
    let mut counts = vec![0u64; plane];
    let mut slots = 0u64;
    let mut ratio_sum = 0.0;
    let mut ratio_max = 0.0f64;
    for s in &dataset.samples {
        let t = &s.target;
        for step in 0..t.shape()[0] {
            for (c, &v) in counts.iter_mut().zip(t.slot(step)) {
                *c += v as u64;
            }
            slots += 1;
        }
        let r = t.rain_ratio();
        ratio_sum += r;
        ratio_max = ratio_max.max(r);
    }
    Ok(ClimatologyMap {
        pixel_freq: counts.iter().map(|&c| c as f64 / slots as f64).collect(),
        side,
        scalar_mean: ratio_sum / dataset.len() as f64,
        scalar_max: ratio_max,
        split,
        region_id: dataset.region_id.clone(),
        year: dataset.year,
    })
}
