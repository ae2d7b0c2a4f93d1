use std::path::Path;

use nowcast_core::container::{Container, ContainerWriter, DType};
use nowcast_core::data::{ContextTensor, ProbCube};
use nowcast_core::{Error, GridSpec, Result};
use nowcast_tensor::ops;
use nowcast_tensor::Var;

use crate::baseline::Baseline;
use crate::config::{BackboneConfig, Family};
use crate::params::{Builder, Ctx, ParamStore};
use crate::swin_unetr::SwinUnetr;
use crate::temporal::temporal_shift_logits;
use crate::vivit::Vivit;

pub enum Arch {
    Baseline(Baseline),
    Vivit(Vivit),
    SwinUnetr(SwinUnetr),
}

/// Logits and probabilities of one sample, both `(out_steps, side, side)`.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Vec<f32>,
    pub probs: ProbCube,
}

pub struct Network {
    pub cfg: BackboneConfig,
    pub grid: GridSpec,
    pub params: ParamStore,
    pub arch: Arch,
}

const PARAM_PREFIX: &str = "param/";

impl Network {
    /// Validates the configuration, then builds and initializes the network.
    pub fn new(cfg: BackboneConfig, grid: GridSpec, seed: u64) -> Result<Self> {
        cfg.validate(&grid)?;
        let mut bld = Builder::new(seed);
        let arch = match cfg.family {
            Family::Baseline => Arch::Baseline(Baseline::new(&mut bld, &cfg, &grid)?),
            Family::Vivit => Arch::Vivit(Vivit::new(&mut bld, &cfg, &grid)?),
            Family::SwinUnetr => Arch::SwinUnetr(SwinUnetr::new(&mut bld, &cfg, &grid)?),
        };
        Ok(Network { cfg, grid, params: bld.finish(), arch })
    }

    /// `(B, bands, steps, side, side)` to logits `(B, out_steps, side, side)`.
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let g = &self.grid;
        let want = [g.in_bands, g.in_steps, g.side, g.side];
        if x.rank() != 5 || x.shape()[1..] != want {
            return Err(Error::domain(format!("expected input (B, {:?}), got {:?}", want, x.shape())));
        }
        let logits = match &self.arch {
            Arch::Baseline(m) => m.forward(ctx, x),
            Arch::Vivit(m) => m.forward(ctx, x),
            Arch::SwinUnetr(m) => m.forward(ctx, x)?,
        };
        Ok(if self.cfg.temporal_shift { temporal_shift_logits(&logits) } else { logits })
    }

    pub fn batch_input(&self, contexts: &[&ContextTensor]) -> Result<Var> {
        let n = self.grid.context_len();
        let mut data = Vec::with_capacity(contexts.len() * n);
        for c in contexts {
            if c.shape() != self.grid.context_shape() {
                return Err(Error::domain(format!("context shape {:?} does not match the grid", c.shape())));
            }
            data.extend_from_slice(c.values());
        }
        let [b, t, h, w] = self.grid.context_shape();
        Ok(Var::constant(data, &[contexts.len(), b, t, h, w]))
    }

    /// Evaluation-mode forward of a batch of contexts.
    pub fn predict_batch(&self, contexts: &[&ContextTensor]) -> Result<Vec<ModelOutput>> {
        let ctx = Ctx::eval(&self.params);
        let logits = self.forward(&ctx, &self.batch_input(contexts)?)?;
        let per = self.grid.target_len();
        let probs = ops::sigmoid(&logits);
        contexts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let p = probs.data()[i * per..(i + 1) * per].to_vec();
                Ok(ModelOutput {
                    logits: logits.data()[i * per..(i + 1) * per].to_vec(),
                    probs: ProbCube::new(p, self.grid.target_shape(), c.meta.clone())?,
                })
            })
            .collect()
    }

    pub fn predict(&self, context: &ContextTensor) -> Result<ModelOutput> {
        Ok(self.predict_batch(&[context])?.remove(0))
    }

    pub fn save_checkpoint(&self, path: &Path, step: u64) -> Result<()> {
        let mut wr = ContainerWriter::new();
        wr.attr("kind", "checkpoint")
            .attr("backbone_config", self.cfg.to_json())
            .attr("grid_spec", self.grid.to_json())
            .attr("step", step);
        for (name, p) in self.params.iter() {
            wr.add_f32(&format!("{PARAM_PREFIX}{name}"), &p.shape, p.data.clone(), DType::F32)?;
        }
        wr.write(path)
    }

    /// Rebuilds the network from the stored configuration and overwrites
    /// every parameter. Returns the stored step counter too.
    pub fn load_checkpoint(path: &Path) -> Result<(Network, u64)> {
        let c = Container::open(path)?;
        let cfg = BackboneConfig::from_json(c.attr_str("backbone_config")?)?;
        let grid = GridSpec::from_json(c.attr_str("grid_spec")?)?;
        let step = c.attr_i64("step")? as u64;
        let mut net = Network::new(cfg, grid, 0)?;
        let stored = c.dataset_names().filter(|n| n.starts_with(PARAM_PREFIX)).count();
        if stored != net.params.len() {
            return Err(Error::format(format!(
                "{}: {} stored parameters, the configuration has {}",
                path.display(),
                stored,
                net.params.len()
            )));
        }
        for (name, p) in net.params.iter_mut() {
            let key = format!("{PARAM_PREFIX}{name}");
            let info = c.dataset(&key).ok_or_else(|| Error::format(format!("checkpoint lacks '{}'", name)))?;
            if info.shape != p.shape {
                return Err(Error::format(format!("'{}' has shape {:?}, expected {:?}", name, info.shape, p.shape)));
            }
            p.data = c.read_f32(&key)?;
        }
        Ok((net, step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Adapter;
    use nowcast_core::data::SampleMeta;

    fn grid() -> GridSpec {
        GridSpec { in_bands: 2, in_steps: 4, out_steps: 8, side: 8, sat_patch_side: 4, resolution_ratio: 2, step_minutes: 15 }
    }

    fn context(g: &GridSpec) -> ContextTensor {
        let v = (0..g.context_len()).map(|i| (i % 13) as f32 / 13.0).collect();
        ContextTensor::new(v, g, SampleMeta::new("r", 2021, "t")).unwrap()
    }

    fn small() -> BackboneConfig {
        BackboneConfig { embed_dim: 2, depths: vec![1, 1], ..BackboneConfig::improved_baseline() }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt.nc5");
        let net = Network::new(small(), grid(), 5).unwrap();
        net.save_checkpoint(&path, 17).unwrap();
        let (back, step) = Network::load_checkpoint(&path).unwrap();
        assert_eq!(step, 17);
        assert_eq!(back.cfg, net.cfg);
        assert_eq!(back.grid, net.grid);
        for ((na, a), (nb, b)) in net.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape, b.shape);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = context(&grid());
        assert_eq!(net.predict(&c).unwrap().logits, back.predict(&c).unwrap().logits);
    }

    #[test]
    fn swin_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt.nc5");
        let g = GridSpec::desk();
        let cfg = BackboneConfig { embed_dim: 6, depths: vec![1, 1, 1], ..BackboneConfig::swin(Adapter::UpsampleDecoder) }.for_grid(&g);
        let net = Network::new(cfg, g, 1).unwrap();
        net.save_checkpoint(&path, 0).unwrap();
        let (back, _) = Network::load_checkpoint(&path).unwrap();
        assert_eq!(back.params.num_scalars(), net.params.num_scalars());
    }

    #[test]
    fn temporal_shift_accumulates_logits() {
        let g = grid();
        let plain = Network::new(small(), g, 9).unwrap();
        let shifted = Network::new(BackboneConfig { temporal_shift: true, ..small() }, g, 9).unwrap();
        let c = context(&g);
        let a = plain.predict(&c).unwrap().logits;
        let b = shifted.predict(&c).unwrap().logits;
        let plane = g.side * g.side;
        for p in 0..plane {
            let mut acc = 0.0f64;
            for t in 0..g.out_steps {
                acc += a[t * plane + p] as f64;
                assert!((b[t * plane + p] as f64 - acc).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_a_domain_error() {
        let net = Network::new(small(), grid(), 0).unwrap();
        let ctx = Ctx::eval(&net.params);
        let err = net.forward(&ctx, &Var::zeros(&[1, 2, 4, 9, 9])).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }
}
