//! Nowcasting networks on a small reverse-mode autograd engine: a 3D U-Net
//! baseline, a factorized video transformer and a Swin-UNETR with three
//! input adapters, plus their training loop.

pub mod attention_core;
pub mod baseline;
pub mod config;
pub mod layers;
pub mod network;
pub mod params;
pub mod swin_unetr;
pub mod temporal;
pub mod training;
pub mod vivit;

pub use config::{Adapter, BackboneConfig, Family, Improvement};
pub use network::{ModelOutput, Network};
pub use params::{Ctx, ParamStore};
pub use training::{select_checkpoint, train, OptimizerKind, Selection, TrainConfig};
