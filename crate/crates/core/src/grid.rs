use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of one nowcasting sample.
///
/// The input is `in_bands × in_steps × side × side` satellite radiances at a
/// coarse resolution; the target is `out_steps × side × side` radar rain
/// masks at a resolution `resolution_ratio` times finer, so the radar area
/// only covers the `sat_patch_side × sat_patch_side` centre of the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub in_bands: usize,
    pub in_steps: usize,
    pub out_steps: usize,
    pub side: usize,
    pub sat_patch_side: usize,
    pub resolution_ratio: usize,
    pub step_minutes: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            in_bands: 11,
            in_steps: 4,
            out_steps: 32,
            side: 252,
            sat_patch_side: 42,
            resolution_ratio: 6,
            step_minutes: 15,
        }
    }
}

impl GridSpec {
    /// Reduced geometry for quick experiments and tests: 64×64 with a 16×16
    /// centre patch at ratio 4.
    pub fn desk() -> Self {
        GridSpec { side: 64, sat_patch_side: 16, resolution_ratio: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bands == 0 || self.in_steps == 0 || self.out_steps == 0 {
            return Err(Error::config("band and step counts must be positive"));
        }
        if self.sat_patch_side == 0 || self.resolution_ratio == 0 {
            return Err(Error::config("sat_patch_side and resolution_ratio must be positive"));
        }
        if self.side != self.sat_patch_side * self.resolution_ratio {
            return Err(Error::config(format!(
                "grid side {} must equal sat_patch_side {} x resolution_ratio {}",
                self.side, self.sat_patch_side, self.resolution_ratio
            )));
        }
        if self.step_minutes == 0 {
            return Err(Error::config("step_minutes must be positive"));
        }
        Ok(())
    }

    pub fn context_shape(&self) -> [usize; 4] {
        [self.in_bands, self.in_steps, self.side, self.side]
    }

    pub fn target_shape(&self) -> [usize; 3] {
        [self.out_steps, self.side, self.side]
    }

    pub fn context_len(&self) -> usize {
        self.context_shape().iter().product()
    }

    pub fn target_len(&self) -> usize {
        self.target_shape().iter().product()
    }

    /// Offset of the radar-covered patch inside the satellite grid.
    pub fn patch_offset(&self) -> usize {
        (self.side - self.sat_patch_side) / 2
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("GridSpec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: GridSpec = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }
}

/// Maps a radar pixel to the satellite pixel that contains it.
pub fn radar_to_sat_coords(h: usize, w: usize, grid: &GridSpec) -> Result<(usize, usize)> {
    grid.validate()?;
    if h >= grid.side || w >= grid.side {
        return Err(Error::domain(format!(
            "radar coordinate ({}, {}) outside 0..{}",
            h, w, grid.side
        )));
    }
    let off = grid.patch_offset();
    Ok((off + h / grid.resolution_ratio, off + w / grid.resolution_ratio))
}
