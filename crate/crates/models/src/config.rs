use std::collections::BTreeSet;

use nowcast_core::{Error, GridSpec, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Baseline,
    Vivit,
    SwinUnetr,
}

/// How the Swin-UNETR family adapts the 4-step input to 32 output steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adapter {
    RepeatInterleave,
    ChannelConv,
    UpsampleDecoder,
}

/// Toggles on the baseline U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Improvement {
    AttentionGrid,
    Rrelu,
    InstanceNorm,
    UpsampleConv,
}

impl Improvement {
    pub const ALL: [Improvement; 4] =
        [Improvement::AttentionGrid, Improvement::Rrelu, Improvement::InstanceNorm, Improvement::UpsampleConv];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub family: Family,
    pub adapter: Option<Adapter>,
    pub improvements: BTreeSet<Improvement>,
    /// Baseline: width of the first level. Swin: token width of stage one.
    /// ViViT: unused (see `token_dim`).
    pub embed_dim: usize,
    /// Baseline: convolutions per level (the length sets the level count).
    /// Swin: blocks per stage. ViViT: `[spatial layers, temporal layers]`.
    pub depths: Vec<usize>,
    /// Attention heads per stage (ViViT uses the first entry).
    pub heads: Vec<usize>,
    pub window: [usize; 3],
    pub patch_size: [usize; 3],
    pub mlp_ratio: usize,
    pub temporal_shift: bool,
    /// Spatial side the Swin input is resized to.
    pub interp_side: usize,
    /// ViViT class-token width; must be a perfect square.
    pub token_dim: usize,
    /// Channels of the full-resolution Swin decoder level.
    pub decoder_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

impl BackboneConfig {
    pub fn baseline() -> Self {
        BackboneConfig {
            family: Family::Baseline,
            adapter: None,
            improvements: BTreeSet::new(),
            embed_dim: 8,
            depths: vec![2, 2, 2],
            heads: vec![2],
            window: [2, 4, 4],
            patch_size: [1, 8, 8],
            mlp_ratio: 2,
            temporal_shift: false,
            interp_side: 64,
            token_dim: 64,
            decoder_channels: 8,
        }
    }

    /// The baseline with every improvement switched on.
    pub fn improved_baseline() -> Self {
        BackboneConfig { improvements: Improvement::ALL.into_iter().collect(), ..Self::baseline() }
    }

    pub fn vivit() -> Self {
        BackboneConfig {
            family: Family::Vivit,
            embed_dim: 64,
            depths: vec![2, 1],
            heads: vec![4],
            patch_size: [1, 8, 8],
            token_dim: 64,
            ..Self::baseline()
        }
    }

    pub fn swin(adapter: Adapter) -> Self {
        BackboneConfig {
            family: Family::SwinUnetr,
            adapter: Some(adapter),
            embed_dim: 24,
            depths: vec![2, 2, 2],
            heads: vec![2, 2, 2],
            window: [2, 4, 4],
            patch_size: [2, 2, 2],
            interp_side: 256,
            ..Self::baseline()
        }
    }

    /// Default configuration of a family at a given grid: the Swin input
    /// side is the grid side rounded up to a multiple of 32.
    pub fn for_grid(mut self, grid: &GridSpec) -> Self {
        self.interp_side = grid.side.div_ceil(32) * 32;
        self
    }

    pub fn has(&self, i: Improvement) -> bool {
        self.improvements.contains(&i)
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        grid.validate()?;
        if self.depths.is_empty() || self.depths.contains(&0) {
            return Err(Error::config(format!("depths must be non-empty and positive, got {:?}", self.depths)));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        match self.family {
            Family::Baseline => {
                if self.adapter.is_some() {
                    return Err(Error::config("the baseline takes no adapter"));
                }
            }
            Family::Vivit => {
                let r = self.token_side();
                if r * r != self.token_dim || r == 0 {
                    return Err(Error::config(format!(
                        "token_dim {} is not a perfect square",
                        self.token_dim
                    )));
                }
                if self.depths.len() != 2 {
                    return Err(Error::config("vivit depths must be [spatial, temporal]"));
                }
                if self.heads.is_empty() || self.token_dim % self.heads[0] != 0 {
                    return Err(Error::config(format!("token_dim {} not divisible by heads {:?}", self.token_dim, self.heads)));
                }
                if !improvements_empty(self) || self.adapter.is_some() {
                    return Err(Error::config("vivit takes no adapter or improvements"));
                }
            }
            Family::SwinUnetr => {
                if self.interp_side % 32 != 0 || self.interp_side == 0 {
                    return Err(Error::config(format!(
                        "interp_side {} must be divisible by 32 (the encoder halves the grid five times)",
                        self.interp_side
                    )));
                }
                if self.adapter.is_none() {
                    return Err(Error::config("swin_unetr needs an adapter"));
                }
                if self.heads.len() != self.depths.len() {
                    return Err(Error::config("swin heads and depths must have the same length"));
                }
                if self.window.contains(&0) || self.patch_size.contains(&0) {
                    return Err(Error::config("window and patch sizes must be positive"));
                }
                if self.decoder_channels == 0 {
                    return Err(Error::config("decoder_channels must be positive"));
                }
                if !improvements_empty(self) {
                    return Err(Error::config("improvements apply to the baseline only"));
                }
            }
        }
        Ok(())
    }

    pub fn token_side(&self) -> usize {
        (self.token_dim as f64).sqrt().round() as usize
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::config(format!("bad backbone config: {}", e)))
    }

    /// Short label such as `swin_unetr/channel_conv`.
    pub fn label(&self) -> String {
        match (self.family, self.adapter) {
            (Family::Baseline, _) if self.improvements.is_empty() => "baseline".into(),
            (Family::Baseline, _) => "improved_baseline".into(),
            (Family::Vivit, _) => "vivit".into(),
            (Family::SwinUnetr, Some(a)) => format!("swin_unetr/{}", serde_json::to_value(a).unwrap().as_str().unwrap()),
            (Family::SwinUnetr, None) => "swin_unetr".into(),
        }
    }
}

fn improvements_empty(c: &BackboneConfig) -> bool {
    c.improvements.is_empty()
}
