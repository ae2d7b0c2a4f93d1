use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nowcast_core::data::{compute_climatology, dataset_path, ClimatologyMap, DatasetHandle, Split};
use nowcast_core::ensemble::{save_prob_file, save_submission, Submission};
use nowcast_core::losses::pos_weight_from_dataset;
use nowcast_core::postprocess::{apply_calibration, apply_threshold, build_calibration};
use nowcast_core::Error;
use nowcast_models::training::write_metrics_csv;
use nowcast_models::{select_checkpoint, Network, Selection};
use serde::{Deserialize, Serialize};

use crate::data_cmd::{load_split, split_files};
use crate::{default_out, Common, PredictArgs, Session, TrainArgs};

pub const REPORT_FILE: &str = "train_report.json";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub epoch: usize,
    /// Relative to the training output directory.
    pub file: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: String,
    pub initial_loss: f64,
    pub step_losses: Vec<f64>,
    pub skipped_steps: u64,
    pub checkpoints: Vec<CheckpointEntry>,
    pub selected_epoch: usize,
}

impl TrainSummary {
    pub fn selected(&self) -> Option<&CheckpointEntry> {
        self.checkpoints.iter().find(|c| c.epoch == self.selected_epoch)
    }
}

pub fn train(mut s: Session, common: &Common, a: &TrainArgs) -> Result<()> {
    let t = &mut s.cfg.train;
    if let Some(v) = a.epochs {
        t.options.epochs = v;
    }
    if let Some(v) = a.lr {
        t.options.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.options.batch_size = v;
    }
    if let Some(v) = a.optimizer {
        t.options.optimizer = v;
    }
    if let Some(v) = a.loss {
        t.options.loss.kind = v;
    }
    t.options.train_all |= a.train_all;
    t.auto_pos_weight |= a.auto_pos_weight;
    if let Some(m) = a.model {
        s.cfg.model.preset = m;
    }
    if a.temporal_shift {
        s.cfg.model.overrides.insert("temporal_shift".into(), true.into());
    }

    let root = s.cfg.data_root(None);
    let root = a.data.clone().unwrap_or(root);
    let regions = a.regions.as_deref();
    let (train_set, mut inputs) = load_split(&root, Split::Train, regions)?;
    let val = match load_split(&root, Split::Val, regions) {
        Ok((v, files)) => {
            inputs.extend(files);
            Some(v)
        }
        Err(_) => None,
    };
    let grid = train_set.grid;
    let backbone = s.cfg.model.resolve(&grid)?;
    if s.cfg.train.auto_pos_weight {
        s.cfg.train.options.loss.pos_weight = pos_weight_from_dataset(&train_set)?;
    }
    let opts = s.cfg.train.options.clone();
    let out = default_out(common, "train");
    let mut manifest = s.manifest("train")?;
    manifest.inputs = inputs;

    let label = backbone.label();
    let mut net = Network::new(backbone, grid, s.cfg.seed)?;
    println!("{}: {} parameters, {} training samples", label, net.params.num_scalars(), train_set.len());
    let ckpt_dir = out.join("checkpoints");
    let report = nowcast_models::train(&mut net, &train_set, val.as_ref(), &opts, Some(&ckpt_dir))?;
    println!("initial loss {:.5}", report.initial_loss);
    for m in &report.metrics {
        match m.val_iou {
            Some(v) => println!("epoch {} train_loss {:.5} val_iou {:.4}{}", m.epoch, m.train_loss, v, if m.reliable { "" } else { " (seen)" }),
            None => println!("epoch {} train_loss {:.5}", m.epoch, m.train_loss),
        }
    }

    let usable_val = val.is_some() && !opts.train_all;
    let strategy = if usable_val { s.cfg.train.selection } else { Selection::Last };
    let selected_epoch = if report.metrics.is_empty() { 0 } else { select_checkpoint(&report.metrics, strategy)? };
    let checkpoints = report
        .checkpoints
        .iter()
        .map(|c| {
            let path = c.path.as_ref().expect("checkpoints are written to disk");
            CheckpointEntry {
                name: c.name.clone(),
                epoch: c.epoch,
                file: path.strip_prefix(&out).unwrap_or(path).to_path_buf(),
            }
        })
        .collect();
    let summary = TrainSummary {
        model: label,
        initial_loss: report.initial_loss,
        step_losses: report.step_losses.clone(),
        skipped_steps: report.skipped_steps,
        checkpoints,
        selected_epoch,
    };
    let metrics_path = out.join(METRICS_FILE);
    write_metrics_csv(File::create(&metrics_path)?, &report.metrics)?;
    let report_path = out.join(REPORT_FILE);
    std::fs::write(&report_path, serde_json::to_string_pretty(&summary)?)?;
    let chosen = summary.selected().expect("selected epoch has a checkpoint");
    println!("selected '{}' ({})", chosen.name, out.join(&chosen.file).display());

    manifest.outputs = vec![metrics_path, report_path];
    manifest.outputs.extend(report.checkpoints.iter().filter_map(|c| c.path.clone()));
    manifest.finish(&out)?;
    Ok(())
}

/// A checkpoint file, or the selected checkpoint of a training directory.
pub fn resolve_checkpoint(path: &Path) -> Result<(PathBuf, String)> {
    if path.is_dir() {
        let rp = path.join(REPORT_FILE);
        let text = std::fs::read_to_string(&rp).with_context(|| format!("reading {}", rp.display()))?;
        let summary: TrainSummary = serde_json::from_str(&text).map_err(|e| Error::format(e.to_string()))?;
        let c = summary.selected().ok_or_else(|| Error::format(format!("{}: no selected checkpoint", rp.display())))?;
        return Ok((path.join(&c.file), c.name.clone()));
    }
    let name = path.file_name().map(|n| n.to_string_lossy().replace(".ckpt.nc5", "")).unwrap_or_default();
    Ok((path.to_path_buf(), name))
}

fn climatology_of(root: &Path, region: &str, year: i32, split: Split) -> Result<ClimatologyMap> {
    let h = DatasetHandle::open(&dataset_path(root, region, year, split))?;
    match h.climatology()? {
        Some(c) => Ok(c),
        None => Ok(compute_climatology(&h.load()?, split)?),
    }
}

/// `<out>/probs/<year>/<region>.prob.nc5`
pub fn prob_path(out: &Path, region: &str, year: i32) -> PathBuf {
    out.join("probs").join(year.to_string()).join(format!("{}.prob.nc5", region))
}

pub fn predict(mut s: Session, common: &Common, a: &PredictArgs) -> Result<()> {
    let p = &mut s.cfg.predict;
    if let Some(v) = a.split {
        p.split = v;
    }
    if let Some(v) = a.threshold {
        p.threshold = v;
    }
    p.calibrate |= a.calibrate;
    let pc = s.cfg.predict.clone();
    if !(pc.threshold > 0.0 && pc.threshold < 1.0) {
        return Err(Error::config(format!("threshold must lie in (0, 1), got {}", pc.threshold)).into());
    }
    if pc.batch_size == 0 {
        return Err(Error::config("predict batch_size must be positive").into());
    }
    let root = a.data.clone().unwrap_or_else(|| s.cfg.data_root(None));
    let (ckpt, ckpt_name) = resolve_checkpoint(&a.checkpoint)?;
    let (net, _) = Network::load_checkpoint(&ckpt)?;
    let out = default_out(common, "predict");
    let mut manifest = s.manifest("predict")?;
    manifest.inputs.push(ckpt.clone());

    let mut sub = Submission::new(a.name.clone().unwrap_or(ckpt_name));
    for (path, h) in split_files(&root, pc.split, None)? {
        manifest.inputs.push(path);
        let ds = h.load()?;
        if ds.grid != net.grid {
            return Err(Error::domain(format!("{} does not match the checkpoint grid", h.region_id)).into());
        }
        let calib = if pc.calibrate {
            let train = climatology_of(&root, &h.region_id, h.year, Split::Train)?;
            let val = climatology_of(&root, &h.region_id, h.year, Split::Val)?;
            Some(build_calibration(&train, &val, pc.clip, pc.calibration_form)?)
        } else {
            None
        };
        let mut probs = Vec::with_capacity(ds.len());
        for chunk in ds.samples.chunks(pc.batch_size) {
            let ctxs: Vec<_> = chunk.iter().map(|s| &s.context).collect();
            for o in net.predict_batch(&ctxs)? {
                probs.push(match &calib {
                    Some(m) => apply_calibration(&o.probs, m)?,
                    None => o.probs,
                });
            }
        }
        for (i, pcube) in probs.iter().enumerate() {
            sub.insert(&h.region_id, h.year, i, apply_threshold(pcube, pc.threshold)?);
        }
        let pp = prob_path(&out, &h.region_id, h.year);
        save_prob_file(&pp, &sub.name, &h.region_id, h.year, &probs)?;
        println!("{} / {}: {} samples", h.region_id, h.year, probs.len());
        manifest.outputs.push(pp);
    }
    save_submission(&out, &sub)?;
    manifest.outputs.push(out.clone());
    manifest.finish(&out)?;
    println!("submission '{}' written to {}", sub.name, out.display());
    Ok(())
}
