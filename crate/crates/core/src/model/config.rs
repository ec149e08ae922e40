use serde::{Deserialize, Serialize};

use crate::crystal::MAX_SPECIES;
use crate::error::{Error, Result};
use crate::features::PosEncodingConfig;
use crate::frames::FrameMethod;

/// Default neighbor radius in units of the per-atom decay length.
pub const DEFAULT_RADIUS_MULTIPLIER: f64 = 3.5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// State width `d`.
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Hidden width of the per-block feed-forward sublayer.
    pub ffn_width: usize,
    pub frame_method: FrameMethod,
    pub pos: PosEncodingConfig,
    /// Bounds of the per-atom, per-head decay length in Å.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Decay length at initialization in Å.
    pub sigma_init: f64,
    pub species_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            heads: 8,
            blocks: 4,
            ffn_width: 128,
            frame_method: FrameMethod::Max,
            pos: PosEncodingConfig::default_config(),
            sigma_min: 0.5,
            sigma_max: 7.0,
            sigma_init: 1.5,
            species_count: MAX_SPECIES as usize,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, detail: String| Err(Error::Config { key: key.into(), detail });
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail("model.width", format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.blocks == 0 {
            return fail("model.blocks", "at least one block is required".into());
        }
        if self.ffn_width == 0 {
            return fail("model.ffn_width", "must be positive".into());
        }
        if !(self.sigma_min > 0.0) || !(self.sigma_max > self.sigma_min) {
            return fail("model.sigma_min", format!("need 0 < sigma_min < sigma_max, got {} and {}", self.sigma_min, self.sigma_max));
        }
        if !(self.sigma_init > self.sigma_min && self.sigma_init < self.sigma_max) {
            return fail("model.sigma_init", format!("{} lies outside ({}, {})", self.sigma_init, self.sigma_min, self.sigma_max));
        }
        if self.species_count == 0 || self.species_count > MAX_SPECIES as usize {
            return fail("model.species_count", format!("must be in 1..={MAX_SPECIES}"));
        }
        self.pos.validate().map_err(|e| Error::Config {
            key: "pos".into(),
            detail: e.to_string(),
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Whether the frame-projected angular term contributes at all.
    pub fn uses_angles(&self) -> bool {
        self.frame_method != FrameMethod::None && self.pos.c_angl != 0.0
    }
}
