//! Submissions and the two ways of combining them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerWriter, DType};
use crate::data::{ProbCube, RainCube, SampleMeta};
use crate::error::{Error, Result};
use crate::metrics::{IouCounts, IouMode, ScoreRecord};

/// `(region_id, year, sample_index)`
pub type SubmissionKey = (String, i32, usize);

pub const SUBMISSION_DATASET: &str = "submission";
pub const SUBMISSION_SUFFIX: &str = ".pred.nc5";

#[derive(Clone, Debug, PartialEq)]
pub struct Submission {
    pub name: String,
    pub cubes: BTreeMap<SubmissionKey, RainCube>,
}

impl Submission {
    pub fn new(name: impl Into<String>) -> Self {
        Submission { name: name.into(), cubes: BTreeMap::new() }
    }

    pub fn insert(&mut self, region_id: &str, year: i32, index: usize, cube: RainCube) {
        self.cubes.insert((region_id.to_string(), year, index), cube);
    }

    pub fn keys(&self) -> BTreeSet<SubmissionKey> {
        self.cubes.keys().cloned().collect()
    }

    pub fn region_years(&self) -> BTreeSet<(String, i32)> {
        self.cubes.keys().map(|(r, y, _)| (r.clone(), *y)).collect()
    }

    /// Keys of `expected` this submission lacks.
    pub fn missing(&self, expected: &BTreeSet<SubmissionKey>) -> Vec<SubmissionKey> {
        expected.iter().filter(|k| !self.cubes.contains_key(*k)).cloned().collect()
    }

    pub fn is_complete(&self, expected: &BTreeSet<SubmissionKey>) -> bool {
        self.missing(expected).is_empty()
    }

    /// One IoU per (region, year), pooled over that region's samples.
    pub fn score(&self, truth: &Submission, mode: IouMode) -> Result<Vec<ScoreRecord>> {
        let missing = truth.missing(&self.keys());
        if !missing.is_empty() {
            return Err(Error::domain(format!("truth lacks {} predicted keys, first {:?}", missing.len(), missing[0])));
        }
        let mut out = Vec::new();
        for (region, year) in self.region_years() {
            let mut counts = IouCounts::default();
            let mut slot_sum = 0.0;
            let mut n = 0usize;
            for (key, cube) in self.cubes.iter().filter(|((r, y, _), _)| *r == region && *y == year) {
                let (r, y, _) = key;
                let gt = &truth.cubes[key];
                if gt.shape() != cube.shape() {
                    return Err(Error::domain(format!("shape mismatch in {} / {}", r, y)));
                }
                match mode {
                    IouMode::Pooled => counts.add(IouCounts::of(cube.values(), gt.values())?),
                    IouMode::PerSlot => {
                        slot_sum += crate::metrics::cube_iou(cube.values(), gt.values(), cube.shape()[0], mode)?;
                        n += 1;
                    }
                }
            }
            let iou = match mode {
                IouMode::Pooled => counts.iou(),
                IouMode::PerSlot => slot_sum / n as f64,
            };
            out.push(ScoreRecord::new(&self.name, region, year, iou));
        }
        Ok(out)
    }
}

/// All keys for `samples` samples in every (region, year).
pub fn expected_keys(regions: &[&str], years: &[i32], samples: usize) -> BTreeSet<SubmissionKey> {
    let mut out = BTreeSet::new();
    for r in regions {
        for &y in years {
            for i in 0..samples {
                out.insert((r.to_string(), y, i));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    #[default]
    Dry,
    Wet,
}

/// Per pixel, rain iff more members say rain than no rain.
pub fn majority_vote(subs: &[Submission], tie_break: TieBreak) -> Result<Submission> {
    if subs.len() < 2 {
        return Err(Error::domain(format!("majority vote needs at least 2 submissions, got {}", subs.len())));
    }
    let keys = subs[0].keys();
    for s in &subs[1..] {
        let mut missing = s.missing(&keys);
        missing.extend(subs[0].missing(&s.keys()));
        if !missing.is_empty() {
            let shown: Vec<String> = missing.iter().take(5).map(|(r, y, i)| format!("{}/{}/{}", r, y, i)).collect();
            return Err(Error::domain(format!(
                "submissions '{}' and '{}' are not aligned; {} differing keys: {}",
                subs[0].name,
                s.name,
                missing.len(),
                shown.join(", ")
            )));
        }
    }
    let m = subs.len();
    let mut out = Submission::new("majority vote");
    for key in keys {
        let first = &subs[0].cubes[&key];
        let mut counts = vec![0u32; first.values().len()];
        for s in subs {
            let c = &s.cubes[&key];
            if c.shape() != first.shape() {
                return Err(Error::domain(format!("cube shapes differ at {:?}", key)));
            }
            for (n, &v) in counts.iter_mut().zip(c.values()) {
                *n += v as u32;
            }
        }
        let vote = counts
            .iter()
            .map(|&ones| {
                let zeros = m as u32 - ones;
                match ones.cmp(&zeros) {
                    std::cmp::Ordering::Greater => 1,
                    std::cmp::Ordering::Less => 0,
                    std::cmp::Ordering::Equal => (tie_break == TieBreak::Wet) as u8,
                }
            })
            .collect();
        out.cubes.insert(key, RainCube::new(vote, first.shape(), first.meta.clone())?);
    }
    Ok(out)
}

/// For each (region, year), the cubes of the submission that scored best
/// there. Ties go to the earlier submission.
pub fn best_per_region(subs: &[Submission], scores: &[ScoreRecord]) -> Result<Submission> {
    let first = subs.first().ok_or_else(|| Error::domain("no submissions to combine"))?;
    let lookup: BTreeMap<(&str, &str, i32), f64> =
        scores.iter().map(|s| ((s.submission_name.as_str(), s.region_id.as_str(), s.year), s.iou)).collect();
    let mut out = Submission::new("best per region");
    for (region, year) in first.region_years() {
        let mut best: Option<(&Submission, f64)> = None;
        for s in subs {
            let v = *lookup.get(&(s.name.as_str(), region.as_str(), year)).ok_or_else(|| {
                Error::domain(format!("no score for submission '{}' in {} / {}", s.name, region, year))
            })?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((s, v));
            }
        }
        let (winner, _) = best.expect("at least one submission");
        let mut found = false;
        for (k, c) in winner.cubes.iter().filter(|((r, y, _), _)| *r == region && *y == year) {
            out.cubes.insert(k.clone(), c.clone());
            found = true;
        }
        if !found {
            return Err(Error::domain(format!("submission '{}' has no cubes for {} / {}", winner.name, region, year)));
        }
    }
    Ok(out)
}

/// `<dir>/<year>/<region>.pred.nc5`
pub fn submission_file(dir: &Path, region_id: &str, year: i32) -> PathBuf {
    dir.join(year.to_string()).join(format!("{}{}", region_id, SUBMISSION_SUFFIX))
}

fn region_cubes<'a>(sub: &'a Submission, region: &str, year: i32) -> Result<Vec<&'a RainCube>> {
    let cubes: Vec<(&usize, &RainCube)> = sub
        .cubes
        .iter()
        .filter(|((r, y, _), _)| r == region && *y == year)
        .map(|((_, _, i), c)| (i, c))
        .collect();
    for (n, (i, _)) in cubes.iter().enumerate() {
        if **i != n {
            return Err(Error::domain(format!("{} / {}: sample indices are not 0..{}", region, year, cubes.len())));
        }
    }
    Ok(cubes.into_iter().map(|(_, c)| c).collect())
}

/// Writes one mask file per (region, year).
pub fn save_submission(dir: &Path, sub: &Submission) -> Result<()> {
    for (region, year) in sub.region_years() {
        let cubes = region_cubes(sub, &region, year)?;
        let shape = cubes[0].shape();
        let mut data = Vec::with_capacity(cubes.len() * cubes[0].values().len());
        let mut stamps = Vec::new();
        for c in &cubes {
            if c.shape() != shape {
                return Err(Error::domain(format!("{} / {}: cube shapes differ", region, year)));
            }
            data.extend_from_slice(c.values());
            stamps.push(serde_json::Value::from(c.meta.timestamp.clone()));
        }
        let path = submission_file(dir, &region, year);
        std::fs::create_dir_all(path.parent().expect("has a year directory"))?;
        let mut w = ContainerWriter::new();
        w.attr("name", sub.name.as_str()).attr("region_id", region.as_str()).attr("year", year).attr("timestamps", stamps);
        w.add_u8(SUBMISSION_DATASET, &[cubes.len(), shape[0], shape[1], shape[2]], data)?;
        w.write(&path)?;
    }
    Ok(())
}

/// Writes probability cubes for one (region, year) as f16.
pub fn save_prob_file(path: &Path, name: &str, region_id: &str, year: i32, cubes: &[ProbCube]) -> Result<()> {
    let first = cubes.first().ok_or_else(|| Error::domain("no cubes to write"))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(cubes.len() * first.values().len());
    let mut stamps = Vec::new();
    for c in cubes {
        if c.shape() != shape {
            return Err(Error::domain("probability cube shapes differ"));
        }
        data.extend_from_slice(c.values());
        stamps.push(serde_json::Value::from(c.meta.timestamp.clone()));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = ContainerWriter::new();
    w.attr("name", name).attr("region_id", region_id).attr("year", year).attr("timestamps", stamps);
    w.add_f32(SUBMISSION_DATASET, &[cubes.len(), shape[0], shape[1], shape[2]], data, DType::F16)?;
    w.write(path)
}

struct FileHead {
    container: Container,
    name: String,
    region_id: String,
    year: i32,
    shape: Vec<usize>,
    stamps: Vec<String>,
}

fn open_head(path: &Path) -> Result<FileHead> {
    let container = Container::open(path)?;
    let name = container.attr_str("name")?.to_string();
    let region_id = container.attr_str("region_id")?.to_string();
    let year = container.attr_i64("year")? as i32;
    let info = container
        .dataset(SUBMISSION_DATASET)
        .ok_or_else(|| Error::format(format!("{} has no '{}' dataset", path.display(), SUBMISSION_DATASET)))?;
    if info.shape.len() != 4 {
        return Err(Error::format(format!("{}: submission must be 4-d, got {:?}", path.display(), info.shape)));
    }
    let shape = info.shape.clone();
    let stamps = container
        .attr("timestamps")
        .and_then(|v| v.as_array())
        .map(|a| a.iter().map(|s| s.as_str().unwrap_or_default().to_string()).collect())
        .unwrap_or_else(|| vec![String::new(); shape[0]]);
    Ok(FileHead { container, name, region_id, year, shape, stamps })
}

pub fn load_prob_file(path: &Path) -> Result<Vec<ProbCube>> {
    let h = open_head(path)?;
    let shape = [h.shape[1], h.shape[2], h.shape[3]];
    (0..h.shape[0])
        .map(|i| {
            let v = h.container.read_f32_rows(SUBMISSION_DATASET, i, 1)?;
            ProbCube::new(v, shape, SampleMeta::new(h.region_id.clone(), h.year, h.stamps[i].clone()))
        })
        .collect()
}

/// Reads every `<year>/<region>.pred.nc5` mask file under `dir`.
pub fn load_submission(dir: &Path) -> Result<Submission> {
    let mut files = Vec::new();
    for year_dir in std::fs::read_dir(dir)? {
        let year_dir = year_dir?.path();
        if !year_dir.is_dir() {
            continue;
        }
        for f in std::fs::read_dir(&year_dir)? {
            let f = f?.path();
            if f.to_string_lossy().ends_with(SUBMISSION_SUFFIX) {
                files.push(f);
            }
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::domain(format!("no submission files under {}", dir.display())));
    }
    let mut sub: Option<Submission> = None;
    for f in files {
        let h = open_head(&f)?;
        let s = sub.get_or_insert_with(|| Submission::new(h.name.clone()));
        let shape = [h.shape[1], h.shape[2], h.shape[3]];
        for i in 0..h.shape[0] {
            let v = h.container.read_u8_rows(SUBMISSION_DATASET, i, 1)?;
            let meta = SampleMeta::new(h.region_id.clone(), h.year, h.stamps[i].clone());
            s.insert(&h.region_id, h.year, i, RainCube::new(v, shape, meta)?);
        }
    }
    Ok(sub.expect("at least one file"))
}
