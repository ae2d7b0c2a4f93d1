//! Data contract, metrics, losses, post-processing and ensembling for
//! satellite-to-radar rain nowcasting.

pub mod container;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod postprocess;

pub use error::{Error, Result};
pub use grid::{radar_to_sat_coords, GridSpec};
