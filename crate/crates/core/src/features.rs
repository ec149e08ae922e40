//! Gaussian basis expansions and the frame-projected relative position encoding.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Evenly spaced Gaussian basis on `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbfConfig {
    pub min: f64,
    pub max: f64,
    /// Width as a multiple of the center spacing.
    pub width_scale: f64,
    pub count: usize,
}

impl GbfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max > self.min) || self.count < 2 || !(self.width_scale > 0.0) {
            return Err(Error::invalid(format!("invalid Gaussian basis {self:?}")));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        self.min + k as f64 * self.spacing()
    }

    pub fn width(&self) -> f64 {
        self.width_scale * self.spacing()
    }

    /// Writes the `count` basis values at `x` into `out`.
    pub fn expand_into(&self, x: f64, out: &mut [f64]) {
        let inv = 1.0 / (2.0 * self.width() * self.width());
        for (k, o) in out.iter_mut().enumerate() {
            let z = x - self.center(k);
            *o = (-z * z * inv).exp();
        }
    }
}

/// `exp(-(x - μ_k)² / 2σ_k²)` for every basis function.
pub fn gbf(x: f64, cfg: &GbfConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.count];
    cfg.expand_into(x, &mut out);
    out
}

/// Coefficients and bases of the distance and angular terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosEncodingConfig {
    pub lambda: f64,
    pub c_dist: f64,
    pub c_angl: f64,
    pub dist: GbfConfig,
    pub angl: GbfConfig,
}

impl PosEncodingConfig {
    pub const DIST_DEFAULT: GbfConfig = GbfConfig {
        min: 14.0 / 64.0,
        max: 14.0,
        width_scale: 1.0,
        count: 64,
    };

    pub const ANGL_DEFAULT: GbfConfig = GbfConfig {
        min: -1.0,
        max: 1.0,
        width_scale: 4.0,
        count: 64,
    };

    pub fn default_config() -> Self {
        PosEncodingConfig {
            lambda: 1.0,
            c_dist: 1.0,
            c_angl: 1.0,
            dist: Self::DIST_DEFAULT,
            angl: Self::ANGL_DEFAULT,
        }
    }

    /// Fewer angular bases with the width scale and coefficient adjusted so
    /// the expansion keeps its shape: `s' = s·D'/D`, `c' = c·D/D'`.
    pub fn lightweight() -> Self {
        let base = Self::default_config();
        let count = 16;
        let ratio = count as f64 / base.angl.count as f64;
        PosEncodingConfig {
            lambda: 1.5,
            c_angl: base.c_angl / ratio,
            angl: GbfConfig {
                width_scale: base.angl.width_scale * ratio,
                count,
                ..base.angl
            },
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dist.validate()?;
        self.angl.validate()?;
        for (name, v) in [("lambda", self.lambda), ("c_dist", self.c_dist), ("c_angl", self.c_angl)] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("position encoding {name} must be finite")));
            }
        }
        Ok(())
    }
}

impl Default for PosEncodingConfig {
    fn default() -> Self {
        Self::default_config()
    }
}

/// Distance basis rows for a list of distances, shape `[E, D]`.
pub fn distance_basis(distances: &[f64], cfg: &GbfConfig) -> Tensor {
    let d = cfg.count;
    let mut data = vec![0.0; distances.len() * d];
    for (row, &r) in data.chunks_mut(d).zip(distances) {
        cfg.expand_into(r, row);
    }
    Tensor::new(vec![distances.len(), d], data).expect("shape matches by construction")
}

/// Angular basis rows `[b(θ1) b(θ2) b(θ3)]`, shape `[E, 3D]`.
pub fn angular_basis(angles: &[[f64; 3]], cfg: &GbfConfig) -> Tensor {
    let d = cfg.count;
    let mut data = vec![0.0; angles.len() * 3 * d];
    for (row, theta) in data.chunks_mut(3 * d).zip(angles) {
        for (k, part) in row.chunks_mut(d).enumerate() {
            cfg.expand_into(theta[k], part);
        }
    }
    Tensor::new(vec![angles.len(), 3 * d], data).expect("shape matches by construction")
}

/// Projection matrices of one layer: distance `[D_dist, d]` and the three
/// angular ones stacked as `[3·D_angl, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections<'a> {
    pub dist: &'a Tensor,
    pub angl: &'a Tensor,
}

/// `λ (c_dist W0 b_dist(r) + c_angl Σ_k W_k b_angl(θ_k))` for one edge.
pub fn position_encoding(r: f64, theta: [f64; 3], cfg: &PosEncodingConfig, w: &Projections<'_>) -> Result<Vec<f64>> {
    let (dd, width) = w
        .dist
        .dims2()
        .ok_or_else(|| Error::invalid("distance projection must be a matrix"))?;
    let (da, width_a) = w
        .angl
        .dims2()
        .ok_or_else(|| Error::invalid("angular projection must be a matrix"))?;
    if dd != cfg.dist.count || da != 3 * cfg.angl.count || width != width_a {
        return Err(Error::invalid(format!(
            "projection shapes [{dd},{width}] / [{da},{width_a}] do not match the basis sizes"
        )));
    }
    let mut out = vec![0.0; width];
    let accumulate = |out: &mut [f64], basis: &[f64], mat: &Tensor, coef: f64| {
        for (k, &b) in basis.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(mat.row(k)) {
                *o += coef * b * m;
            }
        }
    };
    accumulate(&mut out, &gbf(r, &cfg.dist), w.dist, cfg.lambda * cfg.c_dist);
    let mut angular = Vec::with_capacity(3 * cfg.angl.count);
    for t in theta {
        angular.extend(gbf(t, &cfg.angl));
    }
    accumulate(&mut out, &angular, w.angl, cfg.lambda * cfg.c_angl);
    Ok(out)
}
