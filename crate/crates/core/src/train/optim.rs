use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ParamStore;

use super::TrainConfig;

/// Steps over which the inverse square root schedule halves `lr²`.
pub const SCHEDULE_HORIZON: f64 = 4000.0;
/// Added to the gradient norm before computing the clip coefficient.
const CLIP_EPSILON: f64 = 1e-6;

/// Warm-up free inverse square root schedule.
pub fn learning_rate(lr0: f64, step: u64) -> f64 {
    // divided form keeps lr(4000) bit-equal to lr0 / √2
    lr0 / ((SCHEDULE_HORIZON + step as f64) / SCHEDULE_HORIZON).sqrt()
}

/// Mean absolute error.
pub fn mae_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_batch(predictions, targets)?;
    let n = predictions.len() as f64;
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// Subgradient of [`mae_loss`] with respect to each prediction; zero where
/// the residual vanishes.
pub fn mae_gradient(predictions: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    check_batch(predictions, targets)?;
    let n = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| match p.partial_cmp(t) {
            Some(std::cmp::Ordering::Greater) => 1.0 / n,
            Some(std::cmp::Ordering::Less) => -1.0 / n,
            _ => 0.0,
        })
        .collect())
}

fn check_batch(predictions: &[f64], targets: &[f64]) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::invalid("loss of an empty batch"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    Ok(())
}

pub fn global_norm(grads: &ParamStore) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    let coef = (max_norm / (norm + CLIP_EPSILON)).min(1.0);
    if coef < 1.0 {
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= coef);
        }
    }
    norm
}

/// First and second moment estimates plus the number of steps taken.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    pub steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
}

/// One AdamW update: clip, update moments, decay weights, step.
pub fn adam_step(params: &mut ParamStore, mut grads: ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<StepInfo> {
    params.check_compatible(&grads)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for `{name}` at step {}",
            state.steps
        )));
    }
    let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
    let lr = learning_rate(cfg.lr0, state.steps);
    let (b1, b2) = cfg.betas;
    let t = (state.steps + 1) as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            *w *= 1.0 - lr * cfg.weight_decay;
            *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
        }
    }
    state.steps += 1;
    Ok(StepInfo { lr, grad_norm })
}

/// Folds `params` into a running mean that already holds `count` snapshots.
pub fn swa_update(running: &mut ParamStore, params: &ParamStore, count: usize) -> Result<()> {
    running.check_compatible(params)?;
    let w = 1.0 / (count as f64 + 1.0);
    for (name, avg) in running.iter_mut() {
        let p = params.get(name)?;
        for (a, x) in avg.data_mut().iter_mut().zip(p.data()) {
            *a += (x - *a) * w;
        }
    }
    Ok(())
}

/// Zero-filled store with the same names and shapes as `like`.
pub fn zeros_like(like: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in like.iter() {
        out.insert(name.clone(), Tensor::zeros(t.shape()));
    }
    out
}
