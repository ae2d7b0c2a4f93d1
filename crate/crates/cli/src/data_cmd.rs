use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nowcast_core::container::DType;
use nowcast_core::data::{
    compute_climatology, concat, dataset_path, list_dataset_files, save_dataset, synth_dataset, Dataset, DatasetHandle,
    Split, SplitSynth,
};

use crate::{Common, ConfigError, Session, SynthArgs};

pub fn synth(mut s: Session, common: &Common, a: &SynthArgs) -> Result<()> {
    let sc = &mut s.cfg.synth;
    if let Some(v) = &a.regions {
        sc.regions = v.clone();
    }
    if let Some(v) = &a.years {
        sc.years = v.clone();
    }
    if let Some(v) = a.train_samples {
        sc.train_samples = v;
    }
    if let Some(v) = a.val_samples {
        sc.val_samples = v;
    }
    if let Some(v) = a.max_speed {
        sc.max_speed = v;
    }
    if let Some(v) = a.n_cells {
        sc.n_cells = v;
    }
    if let Some(v) = a.grid {
        sc.grid = v;
    }
    if sc.regions.is_empty() || sc.years.is_empty() {
        return Err(ConfigError("synth needs at least one region and one year".into()).into());
    }
    let sc = s.cfg.synth.clone();
    let grid = sc.grid.grid();
    grid.validate()?;
    let out = common.out.clone().unwrap_or_else(|| s.cfg.data_root(None));
    std::fs::create_dir_all(&out)?;
    let mut manifest = s.manifest("synth")?;
    for region in &sc.regions {
        for &year in &sc.years {
            for (split, n) in [(Split::Train, sc.train_samples), (Split::Val, sc.val_samples)] {
                let cfg = SplitSynth { n_samples: n, max_speed: sc.max_speed, n_cells: sc.n_cells, intensity: sc.intensity };
                let ds = synth_dataset(&grid, region, year, split, &cfg, s.cfg.seed)?;
                let clim = if ds.is_empty() { None } else { Some(compute_climatology(&ds, split)?) };
                let path = dataset_path(&out, region, year, split);
                save_dataset(&path, &ds, DType::F32, clim.as_ref())?;
                println!("{} ({} samples)", path.display(), n);
                manifest.outputs.push(path);
            }
        }
    }
    manifest.finish(&out)?;
    Ok(())
}

/// Dataset files of one split under `root`, optionally restricted to some
/// regions.
pub fn split_files(root: &Path, split: Split, regions: Option<&[String]>) -> Result<Vec<(PathBuf, DatasetHandle)>> {
    let files = list_dataset_files(root).with_context(|| format!("listing datasets in {}", root.display()))?;
    let mut out = Vec::new();
    for f in files {
        let h = DatasetHandle::open(&f)?;
        if h.split != split {
            continue;
        }
        if let Some(r) = regions {
            if !r.contains(&h.region_id) {
                continue;
            }
        }
        out.push((f, h));
    }
    if out.is_empty() {
        return Err(nowcast_core::Error::domain(format!("no {} datasets under {}", split, root.display())).into());
    }
    Ok(out)
}

/// All samples of one split, concatenated in file order.
pub fn load_split(root: &Path, split: Split, regions: Option<&[String]>) -> Result<(Dataset, Vec<PathBuf>)> {
    let files = split_files(root, split, regions)?;
    let parts = files.iter().map(|(_, h)| h.load()).collect::<nowcast_core::Result<Vec<_>>>()?;
    Ok((concat(&parts)?, files.into_iter().map(|(p, _)| p).collect()))
}
