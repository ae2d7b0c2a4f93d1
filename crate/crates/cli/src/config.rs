//! Run configuration: TOML file merged under command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use nowcast_core::data::Split;
use nowcast_core::ensemble::TieBreak;
use nowcast_core::postprocess::{default_sweep_grid, CalibrationForm};
use nowcast_core::GridSpec;
use nowcast_models::{Adapter, BackboneConfig, Selection, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

pub const DATA_DIR_ENV: &str = "NOWCAST_DATA_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub predict: PredictConfig,
    pub sweep: SweepConfig,
    pub ensemble: EnsembleConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    /// 64×64, for CPU runs.
    #[default]
    Desk,
    /// 252×252 competition geometry.
    Full,
}

impl GridPreset {
    pub fn grid(self) -> GridSpec {
        match self {
            GridPreset::Desk => GridSpec::desk(),
            GridPreset::Full => GridSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub regions: Vec<String>,
    pub years: Vec<i32>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub max_speed: f64,
    pub n_cells: usize,
    pub intensity: f64,
    pub grid: GridPreset,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            regions: vec!["boxi_0015".into(), "roxi_0004".into()],
            years: vec![2019, 2020],
            train_samples: 8,
            val_samples: 4,
            max_speed: 1.0,
            n_cells: 4,
            intensity: 1.0,
            grid: GridPreset::Desk,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Baseline,
    #[default]
    ImprovedBaseline,
    Vivit,
    SwinRepeatInterleave,
    SwinChannelConv,
    SwinUpsampleDecoder,
}

impl ModelPreset {
    /// The preset sized for `grid`.
    pub fn backbone(self, grid: &GridSpec) -> BackboneConfig {
        match self {
            ModelPreset::Baseline => BackboneConfig::baseline(),
            ModelPreset::ImprovedBaseline => BackboneConfig::improved_baseline(),
            ModelPreset::Vivit => BackboneConfig::vivit(),
            ModelPreset::SwinRepeatInterleave => BackboneConfig::swin(Adapter::RepeatInterleave).for_grid(grid),
            ModelPreset::SwinChannelConv => BackboneConfig::swin(Adapter::ChannelConv).for_grid(grid),
            ModelPreset::SwinUpsampleDecoder => BackboneConfig::swin(Adapter::UpsampleDecoder).for_grid(grid),
        }
    }
}

/// A preset plus any backbone fields to override, e.g.
/// `[model] preset = "vivit"  token_dim = 144`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub preset: ModelPreset,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

impl ModelConfig {
    pub fn resolve(&self, grid: &GridSpec) -> Result<BackboneConfig> {
        let mut v = serde_json::to_value(self.preset.backbone(grid))?;
        let obj = v.as_object_mut().expect("backbone config is an object");
        for (k, val) in &self.overrides {
            obj.insert(k.clone(), serde_json::to_value(val)?);
        }
        serde_json::from_value(v).map_err(|e| ConfigError(format!("[model]: {}", e)).into())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Replace the loss pos_weight by the negative/positive ratio of the
    /// training targets.
    pub auto_pos_weight: bool,
    pub selection: Selection,
    pub options: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub split: Split,
    pub threshold: f64,
    pub calibrate: bool,
    pub calibration_form: CalibrationForm,
    pub clip: (f64, f64),
    pub batch_size: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            split: Split::Val,
            threshold: 0.5,
            calibrate: false,
            calibration_form: CalibrationForm::Ratio,
            clip: (0.5, 2.0),
            batch_size: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { grid: default_sweep_grid() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub tie_break: TieBreak,
}

impl RunConfig {
    /// Reads `path` if given; otherwise defaults.
    pub fn load(path: Option<&Path>) -> Result<(RunConfig, Option<String>)> {
        let Some(path) = path else {
            return Ok((RunConfig::default(), None));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {}", path.display(), e)))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e)))?;
        Ok((cfg, Some(text)))
    }

    /// Flag, then config file, then the environment, then `./data`.
    pub fn data_root(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.data_dir {
            return p.clone();
        }
        std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the effective config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nowcast_models::Family;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn model_overrides_apply_on_top_of_the_preset() {
        let cfg: RunConfig = toml::from_str("[model]\npreset = \"vivit\"\ntoken_dim = 144\n").unwrap();
        let b = cfg.model.resolve(&GridSpec::desk()).unwrap();
        assert_eq!(b.family, Family::Vivit);
        assert_eq!(b.token_dim, 144);
        assert_eq!(b.depths, BackboneConfig::vivit().depths);
    }

    #[test]
    fn swin_presets_follow_the_grid() {
        let b = ModelPreset::SwinChannelConv.backbone(&GridSpec::desk());
        assert_eq!(b.interp_side, 64);
        assert_eq!(ModelPreset::SwinChannelConv.backbone(&GridSpec::default()).interp_side, 256);
    }

    #[test]
    fn unknown_model_field_is_rejected() {
        let cfg: RunConfig = toml::from_str("[model]\nembed = 3\n").unwrap();
        assert!(cfg.model.resolve(&GridSpec::desk()).is_err());
    }

    #[test]
    fn unknown_section_is_rejected() {
        assert!(toml::from_str::<RunConfig>("[trian]\nlr = 1\n").is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = RunConfig { seed: 42, ..Default::default() };
        cfg.train.options.lr = 3e-4;
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn data_root_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.data_root(Some(Path::new("flag"))), PathBuf::from("flag"));
        cfg.data_dir = Some("file".into());
        assert_eq!(cfg.data_root(None), PathBuf::from("file"));
        assert_eq!(cfg.data_root(Some(Path::new("flag"))), PathBuf::from("flag"));
    }
}
