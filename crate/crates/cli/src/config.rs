//! Flat `dotted.key = value` run configuration.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use dynframe::data::SplitSpec;
use dynframe::features::PosEncodingConfig;
use dynframe::model::ModelConfig;
use dynframe::train::TrainConfig;

use crate::error::CliError;

/// Everything a command may need, with file values overridden by flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec {
                train: 0.8,
                val: 0.1,
                test: 0.1,
                seed: 0,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    /// Reads `key = value` lines; `#` starts a comment. Later lines win.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), CliError> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{pair}` is not `key=value`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.width" => m.width = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.blocks" => m.blocks = parse(key, value)?,
            "model.ffn_width" => m.ffn_width = parse(key, value)?,
            "model.frame_method" => m.frame_method = parse(key, value)?,
            "model.sigma_min" => m.sigma_min = parse(key, value)?,
            "model.sigma_max" => m.sigma_max = parse(key, value)?,
            "model.sigma_init" => m.sigma_init = parse(key, value)?,
            "model.species_count" => m.species_count = parse(key, value)?,
            "pos.preset" => {
                m.pos = match value {
                    "default" => PosEncodingConfig::default_config(),
                    "lightweight" => PosEncodingConfig::lightweight(),
                    _ => return Err(CliError::Usage(format!("pos.preset must be default or lightweight, got `{value}`"))),
                }
            }
            "pos.lambda" => m.pos.lambda = parse(key, value)?,
            "pos.c_dist" => m.pos.c_dist = parse(key, value)?,
            "pos.c_angl" => m.pos.c_angl = parse(key, value)?,
            "pos.dist.min" => m.pos.dist.min = parse(key, value)?,
            "pos.dist.max" => m.pos.dist.max = parse(key, value)?,
            "pos.dist.width_scale" => m.pos.dist.width_scale = parse(key, value)?,
            "pos.dist.count" => m.pos.dist.count = parse(key, value)?,
            "pos.angl.min" => m.pos.angl.min = parse(key, value)?,
            "pos.angl.max" => m.pos.angl.max = parse(key, value)?,
            "pos.angl.width_scale" => m.pos.angl.width_scale = parse(key, value)?,
            "pos.angl.count" => m.pos.angl.count = parse(key, value)?,
            "train.lr0" => t.lr0 = parse(key, value)?,
            "train.beta1" => t.betas.0 = parse(key, value)?,
            "train.beta2" => t.betas.1 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.clip_norm" => t.clip_norm = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.swa_epochs" => t.swa_epochs = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.max_steps" => t.max_steps = if value == "none" { None } else { Some(parse(key, value)?) },
            "split.train" => self.split.train = parse(key, value)?,
            "split.val" => self.split.val = parse(key, value)?,
            "split.test" => self.split.test = parse(key, value)?,
            "split.seed" => self.split.seed = parse(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        Ok(())
    }
}

/// Model keys and their rendered values, in file order.
pub fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("model.width", m.width.to_string()),
        ("model.heads", m.heads.to_string()),
        ("model.blocks", m.blocks.to_string()),
        ("model.ffn_width", m.ffn_width.to_string()),
        ("model.frame_method", m.frame_method.to_string()),
        ("model.sigma_min", m.sigma_min.to_string()),
        ("model.sigma_max", m.sigma_max.to_string()),
        ("model.sigma_init", m.sigma_init.to_string()),
        ("model.species_count", m.species_count.to_string()),
        ("pos.lambda", m.pos.lambda.to_string()),
        ("pos.c_dist", m.pos.c_dist.to_string()),
        ("pos.c_angl", m.pos.c_angl.to_string()),
        ("pos.dist.min", m.pos.dist.min.to_string()),
        ("pos.dist.max", m.pos.dist.max.to_string()),
        ("pos.dist.width_scale", m.pos.dist.width_scale.to_string()),
        ("pos.dist.count", m.pos.dist.count.to_string()),
        ("pos.angl.min", m.pos.angl.min.to_string()),
        ("pos.angl.max", m.pos.angl.max.to_string()),
        ("pos.angl.width_scale", m.pos.angl.width_scale.to_string()),
        ("pos.angl.count", m.pos.angl.count.to_string()),
    ]
}

/// First model key whose value differs, with both renderings.
pub fn first_mismatch(expected: &ModelConfig, found: &ModelConfig) -> Option<(&'static str, String, String)> {
    model_entries(expected)
        .into_iter()
        .zip(model_entries(found))
        .find(|((_, a), (_, b))| a != b)
        .map(|((key, a), (_, b))| (key, a, b))
}
