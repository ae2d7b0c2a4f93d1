//! Optimizers, the epoch loop and checkpoint selection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nowcast_core::data::{merge_train_val, Dataset, Sample};
use nowcast_core::losses::{value_and_logit_grad, LossConfig};
use nowcast_core::metrics::IouCounts;
use nowcast_core::postprocess::apply_threshold;
use nowcast_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::network::Network;
use crate::params::{Ctx, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    #[serde(rename = "adamw")]
    AdamW,
    #[serde(rename = "adabelief")]
    AdaBelief,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub betas: (f64, f64),
    /// `None` picks the optimizer's default (1e-8 AdamW, 1e-16 AdaBelief).
    pub eps: Option<f64>,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub train_all: bool,
    pub seed: u64,
    /// Accepted and recorded, no effect.
    pub mixed_precision: bool,
    /// Accepted and recorded, no effect.
    pub grad_checkpoint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: None,
            weight_decay: 1e-2,
            epochs: 2,
            batch_size: 2,
            loss: LossConfig::default(),
            train_all: false,
            seed: 0,
            mixed_precision: false,
            grad_checkpoint: false,
        }
    }
}

impl TrainConfig {
    pub fn eps(&self) -> f64 {
        self.eps.unwrap_or(match self.optimizer {
            OptimizerKind::AdamW => 1e-8,
            OptimizerKind::AdaBelief => 1e-16,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.eps() > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        self.loss.validate()
    }
}

/// Moment buffers of every parameter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub skipped: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// One update of every parameter in `grads`. Returns false (and counts the
/// skip) when any gradient is not finite; the parameters are then untouched.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<bool> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::domain(format!("gradient for unknown parameter '{}'", name)))?;
        if p.data.len() != g.len() {
            return Err(Error::domain(format!("'{}': {} gradients for {} values", name, g.len(), p.data.len())));
        }
    }
    if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
        state.skipped += 1;
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let (lr, wd, eps) = (cfg.lr, cfg.weight_decay, cfg.eps());
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            let gi = g[i] as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = match cfg.optimizer {
                OptimizerKind::AdamW => b2 * v[i] + (1.0 - b2) * gi * gi,
                OptimizerKind::AdaBelief => b2 * v[i] + (1.0 - b2) * (gi - m[i]).powi(2) + eps,
            };
            let mut w = p.data[i] as f64;
            w -= lr * wd * w;
            w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            p.data[i] = w as f32;
        }
    }
    Ok(true)
}

fn batch_targets(batch: &[&Sample]) -> Vec<u8> {
    batch.iter().flat_map(|s| s.target.values().iter().copied()).collect()
}

/// Loss of `batch` under a training-mode forward; no update.
pub fn batch_loss(net: &Network, batch: &[&Sample], loss: &LossConfig, seed: u64) -> Result<f64> {
    let ctx = Ctx::train(&net.params, seed);
    let ctxs: Vec<_> = batch.iter().map(|s| &s.context).collect();
    let logits = net.forward(&ctx, &net.batch_input(&ctxs)?)?;
    Ok(value_and_logit_grad(logits.data(), &batch_targets(batch), loss)?.0)
}

/// Forward, backward and one optimizer update. Returns the pre-update loss.
pub fn train_step(
    net: &mut Network,
    batch: &[&Sample],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    seed: u64,
) -> Result<f64> {
    let (loss, grads) = {
        let ctx = Ctx::train(&net.params, seed);
        let ctxs: Vec<_> = batch.iter().map(|s| &s.context).collect();
        let logits = net.forward(&ctx, &net.batch_input(&ctxs)?)?;
        let (loss, g) = value_and_logit_grad(logits.data(), &batch_targets(batch), &cfg.loss)?;
        logits.backward_with(g);
        (loss, ctx.grads())
    };
    optimizer_step(&mut net.params, &grads, state, cfg)?;
    Ok(loss)
}

/// Pooled IoU of thresholded predictions over a dataset.
pub fn evaluate_iou(net: &Network, ds: &Dataset, tau: f64, batch_size: usize) -> Result<f64> {
    let mut counts = IouCounts::default();
    for chunk in ds.samples.chunks(batch_size.max(1)) {
        let ctxs: Vec<_> = chunk.iter().map(|s| &s.context).collect();
        for (out, s) in net.predict_batch(&ctxs)?.iter().zip(chunk) {
            let mask = apply_threshold(&out.probs, tau)?;
            counts.add(IouCounts::of(mask.values(), s.target.values())?);
        }
    }
    Ok(counts.iou())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: Option<f64>,
    /// False when the validation samples were also trained on.
    pub reliable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub epoch: usize,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    pub step_losses: Vec<f64>,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub skipped_steps: u64,
}

pub fn checkpoint_name(epoch: usize, train_all: bool) -> String {
    if train_all {
        format!("train all. Epoch {epoch}")
    } else {
        format!("Epoch {epoch}")
    }
}

fn save(net: &Network, dir: Option<&Path>, epoch: usize, step: u64, train_all: bool) -> Result<CheckpointRecord> {
    let path = match dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            let p = d.join(format!("epoch_{epoch:03}.ckpt.nc5"));
            net.save_checkpoint(&p, step)?;
            Some(p)
        }
        None => None,
    };
    Ok(CheckpointRecord { name: checkpoint_name(epoch, train_all), epoch, path })
}

/// Trains `net` in place. Epoch 0 is the initial checkpoint; with
/// `train_all` the validation samples join the training set and the
/// validation scores are flagged unreliable.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let merged;
    let data = match (cfg.train_all, val_set) {
        (true, Some(v)) => {
            merged = merge_train_val(train_set, v)?;
            &merged
        }
        (true, None) => return Err(Error::config("train_all needs a validation set")),
        (false, _) => train_set,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::default();
    let mut report = TrainReport::default();
    let first: Vec<&Sample> = data.samples.iter().take(cfg.batch_size).collect();
    report.initial_loss = batch_loss(net, &first, &cfg.loss, cfg.seed)?;
    report.checkpoints.push(save(net, checkpoint_dir, 0, 0, cfg.train_all)?);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let seed = cfg.seed.wrapping_add(state.step + state.skipped + 1);
            let loss = train_step(net, &batch, cfg, &mut state, seed)?;
            losses.push(loss);
        }
        report.step_losses.extend_from_slice(&losses);
        let val_iou = match val_set {
            Some(v) => Some(evaluate_iou(net, v, 0.5, cfg.batch_size)?),
            None => None,
        };
        report.metrics.push(EpochMetrics {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_iou,
            reliable: !cfg.train_all,
        });
        report.checkpoints.push(save(net, checkpoint_dir, epoch, state.step, cfg.train_all)?);
    }
    report.skipped_steps = state.skipped;
    Ok(report)
}

pub fn write_metrics_csv<W: Write>(w: W, metrics: &[EpochMetrics]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epoch", "train_loss", "val_iou", "reliable"]).map_err(csv_err)?;
    for m in metrics {
        let val = m.val_iou.map(|v| v.to_string()).unwrap_or_default();
        wr.write_record([m.epoch.to_string(), m.train_loss.to_string(), val, m.reliable.to_string()])
            .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::format(format!("metrics csv: {}", e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    BestValIou,
    Last,
}

/// Epoch of the chosen checkpoint. Ties in validation IoU go to the earlier
/// epoch.
pub fn select_checkpoint(metrics: &[EpochMetrics], strategy: Selection) -> Result<usize> {
    let last = metrics.last().ok_or_else(|| Error::domain("no epochs to select from"))?;
    match strategy {
        Selection::Last => Ok(last.epoch),
        Selection::BestValIou => {
            let mut best: Option<(usize, f64)> = None;
            for m in metrics {
                if let Some(v) = m.val_iou {
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((m.epoch, v));
                    }
                }
            }
            best.map(|(e, _)| e).ok_or_else(|| Error::domain("no epoch has a validation IoU"))
        }
    }
}
