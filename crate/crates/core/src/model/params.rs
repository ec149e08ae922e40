use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore(BTreeMap<String, Tensor>);

impl ParamStore {
    pub fn new() -> Self {
        ParamStore(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.0
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Same names and shapes as `other`.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.0 {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{name}` has shape {:?} vs {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
        }
        if let Some(extra) = other.0.keys().find(|k| !self.0.contains_key(*k)) {
            return Err(Error::invalid(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

pub(crate) fn block_key(layer: usize, name: &str) -> String {
    format!("block{layer}.{name}")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches by construction")
}

/// Random initialization; residual-branch output projections are scaled by
/// `(2·blocks)^(-1/2)` and the decay-length bias starts at `sigma_init`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.width;
    let h = cfg.heads;
    let f = cfg.ffn_width;
    let dd = cfg.pos.dist.count;
    let da = 3 * cfg.pos.angl.count;
    let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let residual = 1.0 / ((2 * cfg.blocks) as f64).sqrt();
    let fraction = (cfg.sigma_init - cfg.sigma_min) / (cfg.sigma_max - cfg.sigma_min);
    let sigma_bias = (fraction / (1.0 - fraction)).ln();

    let mut p = ParamStore::new();
    p.insert("embed", normal(&mut rng, &[cfg.species_count, d], 1.0));
    for l in 0..cfg.blocks {
        for name in ["wq", "wk", "wv"] {
            p.insert(block_key(l, name), normal(&mut rng, &[d, d], inv(d)));
        }
        p.insert(block_key(l, "sigma_w"), normal(&mut rng, &[d, h], 0.1 * inv(d)));
        p.insert(block_key(l, "sigma_b"), Tensor::filled(&[h], sigma_bias));
        p.insert(block_key(l, "psi_dist"), normal(&mut rng, &[dd, d], inv(dd)));
        p.insert(block_key(l, "psi_angl"), normal(&mut rng, &[da, d], inv(da)));
        p.insert(block_key(l, "wo"), normal(&mut rng, &[d, d], inv(d) * residual));
        p.insert(block_key(l, "bo"), Tensor::zeros(&[d]));
        p.insert(block_key(l, "ff1"), normal(&mut rng, &[d, f], inv(d)));
        p.insert(block_key(l, "bf1"), Tensor::zeros(&[f]));
        p.insert(block_key(l, "ff2"), normal(&mut rng, &[f, d], inv(f) * residual));
        p.insert(block_key(l, "bf2"), Tensor::zeros(&[d]));
    }
    p.insert("head.w1", normal(&mut rng, &[d, d], inv(d)));
    p.insert("head.b1", Tensor::zeros(&[d]));
    p.insert("head.w2", normal(&mut rng, &[d, 1], inv(d)));
    p.insert("head.b2", Tensor::zeros(&[1]));
    Ok(p)
}
