//! One container file per (region, year, split).

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::container::{Container, ContainerWriter, DType};
use crate::data::climatology::ClimatologyMap;
use crate::data::types::{ContextTensor, Dataset, RainCube, Sample, SampleMeta, Split};
use crate::error::{Error, Result};
use crate::grid::GridSpec;

pub const DATASET_EXT: &str = "nc5";

pub fn dataset_path(root: &Path, region_id: &str, year: i32, split: Split) -> PathBuf {
    root.join(format!("{}_{}_{}.{}", region_id, year, split, DATASET_EXT))
}

pub fn save_dataset(path: &Path, ds: &Dataset, context_dtype: DType, climatology: Option<&ClimatologyMap>) -> Result<()> {
    let g = ds.grid;
    let n = ds.len();
    let mut context = Vec::with_capacity(n * g.context_len());
    let mut target = Vec::with_capacity(n * g.target_len());
    for s in &ds.samples {
        context.extend_from_slice(s.context.values());
        target.extend_from_slice(s.target.values());
    }
    let ids: Vec<Value> = ds.samples.iter().map(|s| Value::from(s.id.clone())).collect();
    let stamps: Vec<Value> = ds.samples.iter().map(|s| Value::from(s.context.meta.timestamp.clone())).collect();
    let [b, t, h, w] = g.context_shape();
    let [to, th, tw] = g.target_shape();

    let mut wr = ContainerWriter::new();
    wr.attr("region_id", ds.region_id.as_str())
        .attr("year", ds.year)
        .attr("split", ds.split.as_str())
        .attr("grid_spec", g.to_json())
        .attr("sample_ids", ids)
        .attr("timestamps", stamps);
    wr.add_f32("context", &[n, b, t, h, w], context, context_dtype)?;
    wr.add_u8("target", &[n, to, th, tw], target)?;
    if let Some(c) = climatology {
        let freq: Vec<f32> = c.pixel_freq.iter().map(|&v| v as f32).collect();
        wr.add_f32("climatology", &[c.side, c.side], freq, DType::F32)?;
        wr.dataset_attr("climatology", "scalar_mean", c.scalar_mean)?
            .dataset_attr("climatology", "scalar_max", c.scalar_max)?
            .dataset_attr("climatology", "split", c.split.as_str())?;
    }
    wr.write(path)
}

/// Header-level description of a dataset file.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub container: Container,
    pub grid: GridSpec,
    pub region_id: String,
    pub year: i32,
    pub split: Split,
    pub sample_ids: Vec<String>,
    pub timestamps: Vec<String>,
}

impl DatasetHandle {
    pub fn open(path: &Path) -> Result<Self> {
        let container = Container::open(path)?;
        let grid = GridSpec::from_json(container.attr_str("grid_spec")?)?;
        let region_id = container.attr_str("region_id")?.to_string();
        let year = container.attr_i64("year")? as i32;
        let split: Split = container.attr_str("split")?.parse()?;
        let strings = |key: &str| -> Result<Vec<String>> {
            container
                .attr(key)
                .and_then(Value::as_array)
                .ok_or_else(|| Error::format(format!("{}: missing '{}'", path.display(), key)))?
                .iter()
                .map(|v| v.as_str().map(str::to_string).ok_or_else(|| Error::format(format!("bad entry in '{}'", key))))
                .collect()
        };
        let sample_ids = strings("sample_ids")?;
        let timestamps = strings("timestamps")?;
        Ok(DatasetHandle { container, grid, region_id, year, split, sample_ids, timestamps })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    fn meta(&self, i: usize) -> SampleMeta {
        SampleMeta::new(self.region_id.clone(), self.year, self.timestamps[i].clone())
    }

    pub fn read_context(&self, i: usize) -> Result<ContextTensor> {
        let v = self.container.read_f32_rows("context", i, 1)?;
        ContextTensor::new(v, &self.grid, self.meta(i))
    }

    pub fn read_target(&self, i: usize) -> Result<RainCube> {
        let v = self.container.read_u8_rows("target", i, 1)?;
        RainCube::new(v, self.grid.target_shape(), self.meta(i))
    }

    pub fn read_sample(&self, i: usize) -> Result<Sample> {
        Ok(Sample { id: self.sample_ids[i].clone(), context: self.read_context(i)?, target: self.read_target(i)? })
    }

    pub fn load(&self) -> Result<Dataset> {
        let mut ds = Dataset::new(self.grid, self.region_id.clone(), self.year, self.split);
        for i in 0..self.len() {
            ds.push(self.read_sample(i)?)?;
        }
        Ok(ds)
    }

    pub fn climatology(&self) -> Result<Option<ClimatologyMap>> {
        let Some(info) = self.container.dataset("climatology") else {
            return Ok(None);
        };
        let side = info.shape[0];
        let freq = self.container.read_f32("climatology")?;
        let num = |k: &str| info.attrs.get(k).and_then(Value::as_f64).unwrap_or(0.0);
        let split = info.attrs.get("split").and_then(Value::as_str).unwrap_or(self.split.as_str()).parse()?;
        Ok(Some(ClimatologyMap {
            pixel_freq: freq.iter().map(|&v| v as f64).collect(),
            side,
            scalar_mean: num("scalar_mean"),
            scalar_max: num("scalar_max"),
            split,
            region_id: self.region_id.clone(),
            year: self.year,
        }))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    DatasetHandle::open(path)?.load()
}

/// Every dataset file directly under `root`, sorted by file name.
pub fn list_dataset_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let p = entry?.path();
        if p.extension().and_then(|e| e.to_str()) == Some(DATASET_EXT) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::climatology::compute_climatology;
    use crate::data::synth::{synth_dataset, SplitSynth};

    #[test]
    fn dataset_round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::desk();
        let cfg = SplitSynth { n_samples: 3, max_speed: 1.0, n_cells: 5, intensity: 1.0 };
        let ds = synth_dataset(&g, "roxi_0004", 2020, Split::Val, &cfg, 11).unwrap();
        let clim = compute_climatology(&ds, Split::Val).unwrap();
        let path = dataset_path(dir.path(), "roxi_0004", 2020, Split::Val);
        save_dataset(&path, &ds, DType::F32, Some(&clim)).unwrap();

        let h = DatasetHandle::open(&path).unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(h.load().unwrap(), ds);
        let back = h.climatology().unwrap().unwrap();
        assert_eq!(back.scalar_mean, clim.scalar_mean);
        assert_eq!(back.split, Split::Val);
        assert_eq!(list_dataset_files(dir.path()).unwrap(), vec![path]);
    }
}
