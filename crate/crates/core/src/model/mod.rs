//! Distance-decay attention encoder with frame-projected edge features.

mod checkpoint;
mod config;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{ModelConfig, DEFAULT_RADIUS_MULTIPLIER};
pub use forward::{
    attention_block, forward, Forward, ForwardOptions, TraceRecord, TracedImage, STATIC_FRAME_RADIUS,
    TRACE_TOP_IMAGES,
};
pub use params::{init_params, ParamStore};

use crate::crystal::CrystalStructure;
use crate::error::Result;
use crate::frames::{frame_average, FrameMethod, FrameMode};

/// Affine map between model outputs and physical target units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetNorm {
    fn default() -> Self {
        TargetNorm { mean: 0.0, std: 1.0 }
    }
}

impl TargetNorm {
    /// Mean and population standard deviation; a zero spread maps to 1.
    pub fn fit(targets: &[f64]) -> Self {
        if targets.is_empty() {
            return TargetNorm::default();
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        TargetNorm {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Configuration, parameters and target scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub target: TargetNorm,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model {
            config,
            params,
            target: TargetNorm::default(),
        })
    }

    pub fn forward(&self, s: &CrystalStructure, opts: &ForwardOptions) -> Result<Forward> {
        forward(&self.config, &self.params, s, opts)
    }

    /// Output in normalized units. In eval mode conventional PCA frames are
    /// averaged over their four sign choices unless one is requested.
    pub fn predict_normalized(&self, s: &CrystalStructure, opts: &ForwardOptions) -> Result<f64> {
        if self.averages_frames(opts) {
            let outputs = (0..4)
                .map(|k| {
                    let o = ForwardOptions {
                        pca_frame: Some(k),
                        ..opts.clone()
                    };
                    Ok(self.forward(s, &o)?.prediction())
                })
                .collect::<Result<Vec<_>>>()?;
            return frame_average(&outputs);
        }
        Ok(self.forward(s, opts)?.prediction())
    }

    /// Prediction in physical units.
    pub fn predict(&self, s: &CrystalStructure, opts: &ForwardOptions) -> Result<f64> {
        Ok(self.target.denormalize(self.predict_normalized(s, opts)?))
    }

    /// Mean-pooled final atom states (frame-averaged like [`Model::predict`]).
    pub fn encode(&self, s: &CrystalStructure, opts: &ForwardOptions) -> Result<Vec<f64>> {
        let pooled = |o: &ForwardOptions| -> Result<Vec<f64>> {
            let f = self.forward(s, o)?;
            Ok(f.graph.value(f.pooled).data().to_vec())
        };
        if !self.averages_frames(opts) {
            return pooled(opts);
        }
        let mut acc = vec![0.0; self.config.width];
        for k in 0..4 {
            let p = pooled(&ForwardOptions {
                pca_frame: Some(k),
                ..opts.clone()
            })?;
            acc.iter_mut().zip(p).for_each(|(a, v)| *a += v / 4.0);
        }
        Ok(acc)
    }

    /// Eval-mode attention records for every (layer, head, atom).
    pub fn dump_trace(&self, s: &CrystalStructure, opts: &ForwardOptions) -> Result<Vec<TraceRecord>> {
        let o = ForwardOptions {
            mode: FrameMode::Eval,
            record_trace: true,
            ..opts.clone()
        };
        Ok(self.forward(s, &o)?.trace)
    }

    fn averages_frames(&self, opts: &ForwardOptions) -> bool {
        self.config.frame_method == FrameMethod::Pca
            && self.config.uses_angles()
            && opts.mode == FrameMode::Eval
            && opts.pca_frame.is_none()
    }
}
