//! IoU, rate binarization and leaderboard aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intersection and union pixel counts, summed over any number of masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn of(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::domain(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
        }
        let mut c = IouCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            if p > 1 || g > 1 {
                return Err(Error::domain(format!("mask value {} is not binary", p.max(g))));
            }
            c.intersection += (p & g) as u64;
            c.union += (p | g) as u64;
        }
        Ok(c)
    }

    pub fn add(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    /// Empty union scores 1.0: both sides agree there is no rain.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    Ok(IouCounts::of(pred, gt)?.iou())
}

/// How a cube's IoU is reduced over time slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// One IoU over the whole (time, height, width) volume.
    #[default]
    Pooled,
    /// IoU per time slot, then averaged.
    PerSlot,
}

/// IoU of two cubes laid out as `slots` equal consecutive slices.
pub fn cube_iou(pred: &[u8], gt: &[u8], slots: usize, mode: IouMode) -> Result<f64> {
    match mode {
        IouMode::Pooled => iou(pred, gt),
        IouMode::PerSlot => {
            if slots == 0 || pred.len() % slots != 0 {
                return Err(Error::domain(format!("{} values do not split into {} slots", pred.len(), slots)));
            }
            if pred.len() != gt.len() {
                return Err(Error::domain(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
            }
            let n = pred.len() / slots;
            let mut sum = 0.0;
            for (p, g) in pred.chunks(n).zip(gt.chunks(n)) {
                sum += iou(p, g)?;
            }
            Ok(sum / slots as f64)
        }
    }
}

/// 1 where `rate > threshold`.
pub fn binarize_rate(rates: &[f32], threshold: f32) -> Result<Vec<u8>> {
    if !(threshold >= 0.0) {
        return Err(Error::config(format!("rate threshold must be non-negative, got {}", threshold)));
    }
    Ok(rates.iter().map(|&r| (r > threshold) as u8).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub submission_name: String,
    pub region_id: String,
    pub year: i32,
    pub iou: f64,
}

impl ScoreRecord {
    pub fn new(submission_name: impl Into<String>, region_id: impl Into<String>, year: i32, iou: f64) -> Self {
        ScoreRecord { submission_name: submission_name.into(), region_id: region_id.into(), year, iou }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeaderboardRow {
    pub submission_name: String,
    pub total_mean: f64,
    pub year_means: BTreeMap<i32, f64>,
}

/// Mean of the year means, where each year mean averages its regions.
pub fn total_from_year_means(year_means: &BTreeMap<i32, f64>) -> f64 {
    year_means.values().sum::<f64>() / year_means.len() as f64
}

pub fn leaderboard(scores: &[ScoreRecord]) -> Result<Vec<LeaderboardRow>> {
    let mut seen = BTreeSet::new();
    let mut per_sub: BTreeMap<&str, BTreeMap<i32, (f64, usize)>> = BTreeMap::new();
    for s in scores {
        if !seen.insert((s.submission_name.as_str(), s.region_id.as_str(), s.year)) {
            return Err(Error::domain(format!(
                "duplicate score for {} / {} / {}",
                s.submission_name, s.region_id, s.year
            )));
        }
        let acc = per_sub.entry(&s.submission_name).or_default().entry(s.year).or_insert((0.0, 0));
        acc.0 += s.iou;
        acc.1 += 1;
    }
    let mut rows: Vec<LeaderboardRow> = per_sub
        .into_iter()
        .map(|(name, years)| {
            let year_means: BTreeMap<i32, f64> = years.into_iter().map(|(y, (s, n))| (y, s / n as f64)).collect();
            LeaderboardRow { submission_name: name.to_string(), total_mean: total_from_year_means(&year_means), year_means }
        })
        .collect();
    rows.sort_by(|a, b| b.total_mean.total_cmp(&a.total_mean));
    Ok(rows)
}

pub fn write_scores_csv<W: Write>(w: W, scores: &[ScoreRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for s in scores {
        wr.serialize(s)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(r: R) -> Result<Vec<ScoreRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        let s: ScoreRecord = rec?;
        if !(0.0..=1.0).contains(&s.iou) {
            return Err(Error::domain(format!("iou {} out of [0, 1] for {}", s.iou, s.region_id)));
        }
        out.push(s);
    }
    Ok(out)
}
