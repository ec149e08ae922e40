//! Mean-absolute-error training with AdamW, gradient clipping and weight
//! averaging over the final epochs.

mod optim;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Entry;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, ModelConfig, ParamStore, TargetNorm};

pub use optim::{
    adam_step, clip_gradients, global_norm, learning_rate, mae_gradient, mae_loss, swa_update, zeros_like, AdamState,
    StepInfo, SCHEDULE_HORIZON,
};

pub const LOG_HEADER: &str = "epoch,step,lr,train_mae,val_mae,seconds";

/// Optimizer and schedule settings. Defaults follow the large-dataset recipe;
/// desk-scale runs override `epochs`, `batch_size` and `swa_epochs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub swa_epochs: usize,
    pub seed: u64,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-4,
            betas: (0.9, 0.98),
            eps: 1e-8,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            epochs: 2000,
            batch_size: 256,
            swa_epochs: 50,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, detail: &str| {
            Err(Error::Config {
                key: key.into(),
                detail: detail.into(),
            })
        };
        let (b1, b2) = self.betas;
        for (key, v) in [
            ("train.lr0", self.lr0),
            ("train.eps", self.eps),
            ("train.weight_decay", self.weight_decay),
            ("train.clip_norm", self.clip_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(key, "must be positive");
            }
        }
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return fail("train.betas", "both must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return fail("train.batch_size", "must be positive");
        }
        if self.swa_epochs > self.epochs {
            return fail("train.swa_epochs", "cannot exceed train.epochs");
        }
        if self.max_steps == Some(0) {
            return fail("train.max_steps", "must be positive when set");
        }
        Ok(())
    }
}

/// One row of the training log. MAEs are eval-mode, in target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
    pub seconds: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let val = self.val_mae.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.train_mae, val, self.seconds
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
    pub wall_seconds: f64,
    pub last: ParamStore,
    /// Mean of the end-of-epoch parameters over the final epochs.
    pub swa: Option<ParamStore>,
}

impl TrainReport {
    /// Equality ignoring timings.
    pub fn same_trajectory(&self, other: &TrainReport) -> bool {
        let strip = |r: &TrainReport| {
            r.epochs
                .iter()
                .map(|e| (e.epoch, e.step, e.lr.to_bits(), e.train_mae.to_bits(), e.val_mae.map(f64::to_bits)))
                .collect::<Vec<_>>()
        };
        strip(self) == strip(other) && self.steps == other.steps && self.last == other.last && self.swa == other.swa
    }
}

pub struct TrainOutcome {
    /// Parameters after the last step.
    pub model: Model,
    /// Weight-averaged model, when any averaging epochs ran.
    pub swa_model: Option<Model>,
    pub report: TrainReport,
}

/// Eval-mode mean absolute error in target units.
pub fn evaluate_mae(model: &Model, entries: &[Entry]) -> Result<f64> {
    let opts = ForwardOptions::default();
    let preds = entries
        .iter()
        .map(|e| model.predict(&e.structure, &opts))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = entries.iter().map(|e| e.record.target).collect();
    mae_loss(&preds, &targets)
}

fn with_context(epoch: usize, step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Numeric(_) => Error::Numeric(format!("epoch {epoch}, step {step}: {e}")),
        other => other,
    }
}

/// Accumulated gradient of the batch loss plus the loss itself, both on
/// the normalized target scale.
fn batch_gradient(model: &Model, batch: &[&Entry], seed: u64, step: u64) -> Result<(ParamStore, f64)> {
    let opts = ForwardOptions::train(seed, step);
    let mut grads = zeros_like(&model.params);
    let mut preds = Vec::with_capacity(batch.len());
    let mut passes = Vec::with_capacity(batch.len());
    for e in batch {
        let f = model.forward(&e.structure, &opts)?;
        preds.push(f.prediction());
        passes.push(f);
    }
    let targets: Vec<f64> = batch.iter().map(|e| model.target.normalize(e.record.target)).collect();
    let loss = mae_loss(&preds, &targets)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    for (f, w) in passes.iter().zip(mae_gradient(&preds, &targets)?) {
        if w == 0.0 {
            continue;
        }
        let g = f.graph.backward(f.output)?;
        for (name, id) in &f.params {
            let src = g.wrt(*id)?;
            let dst = grads.get_mut(name)?;
            dst.data_mut().iter_mut().zip(src.data()).for_each(|(d, s)| *d += w * s);
        }
    }
    Ok((grads, loss))
}

/// Trains a freshly initialized model. Targets are standardized with the
/// training-set mean and spread; the scaling is stored on the model.
pub fn train(
    train_set: &[Entry],
    val_set: &[Entry],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let start = Instant::now();
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let targets: Vec<f64> = train_set.iter().map(|e| e.record.target).collect();
    model.target = TargetNorm::fit(&targets);

    if let Some(w) = log.as_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
    let planned = match cfg.max_steps {
        Some(m) => cfg.epochs.min(m.div_ceil(per_epoch) as usize),
        None => cfg.epochs,
    };
    let swa_start = planned - cfg.swa_epochs.min(planned);

    let mut state = AdamState::default();
    let mut swa: Option<ParamStore> = None;
    let mut swa_count = 0;
    let mut epochs = Vec::new();
    let mut lr = learning_rate(cfg.lr0, 0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 0..planned {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut stop = false;
        for chunk in order.chunks(cfg.batch_size) {
            let step = state.steps;
            let batch: Vec<&Entry> = chunk.iter().map(|&k| &train_set[k]).collect();
            let (grads, _) = batch_gradient(&model, &batch, cfg.seed, step).map_err(|e| with_context(epoch, step, e))?;
            lr = adam_step(&mut model.params, grads, &mut state, cfg)
                .map_err(|e| with_context(epoch, step, e))?
                .lr;
            if cfg.max_steps.is_some_and(|m| state.steps >= m) {
                stop = true;
                break;
            }
        }
        if epoch >= swa_start {
            match swa.as_mut() {
                None => swa = Some(model.params.clone()),
                Some(avg) => swa_update(avg, &model.params, swa_count)?,
            }
            swa_count += 1;
        }
        let step = state.steps;
        let train_mae = evaluate_mae(&model, train_set).map_err(|e| with_context(epoch, step, e))?;
        let val_mae = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_mae(&model, val_set).map_err(|e| with_context(epoch, step, e))?)
        };
        let row = EpochLog {
            epoch,
            step,
            lr,
            train_mae,
            val_mae,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", row.csv_row())?;
            w.flush()?;
        }
        epochs.push(row);
        if stop {
            break 'epochs;
        }
    }

    let swa_model = swa.clone().map(|params| Model {
        params,
        ..model.clone()
    });
    let report = TrainReport {
        epochs,
        steps: state.steps,
        wall_seconds: start.elapsed().as_secs_f64(),
        last: model.params.clone(),
        swa,
    };
    Ok(TrainOutcome {
        model,
        swa_model,
        report,
    })
}
