use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Where a sample comes from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleMeta {
    pub region_id: String,
    pub year: i32,
    /// ISO-8601 start of the context window.
    pub timestamp: String,
}

impl SampleMeta {
    pub fn new(region_id: impl Into<String>, year: i32, timestamp: impl Into<String>) -> Self {
        SampleMeta { region_id: region_id.into(), year, timestamp: timestamp.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{}'", other))),
        }
    }
}

/// Satellite context block, axes (band, time, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTensor {
    values: Vec<f32>,
    shape: [usize; 4],
    pub meta: SampleMeta,
}

impl ContextTensor {
    pub fn new(values: Vec<f32>, grid: &GridSpec, meta: SampleMeta) -> Result<Self> {
        let shape = grid.context_shape();
        check_len(values.len(), shape.iter().product(), "context")?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("context value at {} is not finite", i)));
        }
        Ok(ContextTensor { values, shape, meta })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Binary rain masks, axes (time, height, width).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RainCube {
    values: Vec<u8>,
    shape: [usize; 3],
    pub meta: SampleMeta,
}

impl RainCube {
    pub fn new(values: Vec<u8>, shape: [usize; 3], meta: SampleMeta) -> Result<Self> {
        check_len(values.len(), shape.iter().product(), "rain cube")?;
        if let Some(i) = values.iter().position(|&v| v > 1) {
            return Err(Error::domain(format!("rain mask value {} at {} is not 0/1", values[i], i)));
        }
        Ok(RainCube { values, shape, meta })
    }

    pub fn zeros(shape: [usize; 3], meta: SampleMeta) -> Self {
        RainCube { values: vec![0; shape.iter().product()], shape, meta }
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn slot_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn slot(&self, t: usize) -> &[u8] {
        let n = self.slot_len();
        &self.values[t * n..(t + 1) * n]
    }

    /// Fraction of rainy pixels over the whole cube.
    pub fn rain_ratio(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|&v| v as u64).sum::<u64>() as f64 / self.values.len() as f64
    }
}

/// Rain probabilities, axes (time, height, width), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbCube {
    values: Vec<f32>,
    shape: [usize; 3],
    pub meta: SampleMeta,
}

impl ProbCube {
    pub fn new(values: Vec<f32>, shape: [usize; 3], meta: SampleMeta) -> Result<Self> {
        check_len(values.len(), shape.iter().product(), "probability cube")?;
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain(format!("probability {} at {} outside [0, 1]", values[i], i)));
        }
        Ok(ProbCube { values, shape, meta })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

fn check_len(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::domain(format!("{} has {} values, expected {}", what, got, want)));
    }
    Ok(())
}

/// One (context, target) pair with a stable identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub context: ContextTensor,
    pub target: RainCube,
}

/// An ordered collection of samples sharing one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub region_id: String,
    pub year: i32,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(grid: GridSpec, region_id: impl Into<String>, year: i32, split: Split) -> Self {
        Dataset { grid, region_id: region_id.into(), year, split, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.context.shape() != self.grid.context_shape()
            || sample.target.shape() != self.grid.target_shape()
        {
            return Err(Error::domain(format!("sample {} does not match the dataset grid", sample.id)));
        }
        self.samples.push(sample);
        Ok(())
    }
}

/// Concatenates the validation samples after the training ones.
pub fn merge_train_val(train: &Dataset, val: &Dataset) -> Result<Dataset> {
    if train.grid != val.grid {
        return Err(Error::config("cannot merge datasets with different grids"));
    }
    let mut merged = train.clone();
    merged.samples.extend(val.samples.iter().cloned());
    Ok(merged)
}

/// Concatenates datasets that share a grid, keeping their order.
pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::domain("nothing to concatenate"))?;
    let mut out = first.clone();
    for p in &parts[1..] {
        out = merge_train_val(&out, p)?;
    }
    Ok(out)
}
