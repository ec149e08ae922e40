use std::cmp::Ordering;

use nalgebra::{Matrix3, Vector3};

use super::{eig3_sym, Frame, FrameMethod, FrameRng, WeightedNeighborhood};
use crate::error::{Error, Result};
use crate::images::{lex_cmp, tied, PeriodicImage};

/// Half-width of the multiplicative weight noise used in train mode.
pub const NOISE_AMPLITUDE: f64 = 1e-3;

/// Fresh-noise attempts before weighted PCA gives up on a degenerate covariance.
pub const PCA_RETRIES: usize = 8;

/// Index of the largest score; near-ties go to the larger lattice key.
fn select(scores: &[f64], nbhd: &WeightedNeighborhood) -> Option<usize> {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return None;
    }
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| tied(s, best))
        .map(|(k, _)| k)
        .max_by(|&a, &b| match lex_cmp(&nbhd.0[a].key, &nbhd.0[b].key) {
            // identical keys only arise from duplicate atoms; prefer the first
            Ordering::Equal => b.cmp(&a),
            o => o,
        })
}

fn weights(nbhd: &WeightedNeighborhood, rng: &mut FrameRng) -> Vec<f64> {
    nbhd.0
        .iter()
        .map(|e| {
            if rng.is_train() {
                e.weight * rng.noise_factor()
            } else {
                e.weight
            }
        })
        .collect()
}

fn require_weight(nbhd: &WeightedNeighborhood) -> Result<()> {
    if nbhd.has_positive_weight() {
        Ok(())
    } else {
        Err(Error::Numeric("frame neighborhood has no positive weight".into()))
    }
}

/// Lexicographically smallest unit vector orthogonal to `e1` among the
/// normalized projections of the signed coordinate axes.
fn orthogonal_fallback(e1: &Vector3<f64>) -> Vector3<f64> {
    let mut best: Option<Vector3<f64>> = None;
    for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
        for s in [1.0, -1.0] {
            let a = axis * s;
            let p = a - e1 * e1.dot(&a);
            if p.norm() < 0.5 {
                continue;
            }
            let p = p.normalize();
            if best.is_none_or(|b| lex_cmp(&p, &b) == Ordering::Less) {
                best = Some(p);
            }
        }
    }
    best.expect("some axis is at least 1/sqrt(3) away from any unit vector")
}

fn max_frame_with(nbhd: &WeightedNeighborhood, w: &[f64], kind: FrameMethod) -> Result<Frame> {
    let i1 = select(w, nbhd).ok_or_else(|| Error::Numeric("frame neighborhood has no positive weight".into()))?;
    let e1 = nbhd.0[i1].dir;
    let adjusted: Vec<f64> = nbhd
        .0
        .iter()
        .zip(w)
        .map(|(e, &wk)| (1.0 - e1.dot(&e.dir).abs()).max(0.0) * wk)
        .collect();
    let w_max = w.iter().copied().fold(0.0, f64::max);
    let best_adjusted = adjusted.iter().copied().fold(0.0, f64::max);
    let (e2, fallback) = if best_adjusted > 1e-12 * w_max {
        let i2 = select(&adjusted, nbhd).expect("positive adjusted weight exists");
        let d = nbhd.0[i2].dir;
        ((d - e1 * e1.dot(&d)).normalize(), false)
    } else {
        (orthogonal_fallback(&e1), true)
    };
    Ok(Frame {
        axes: [e1, e2, e1.cross(&e2)],
        kind,
        degenerate: false,
        fallback,
    })
}

/// Largest-weight direction, then the largest `(1 - |e1·r̄|)·w` direction
/// orthogonalized against it, then their cross product.
pub fn max_frame(nbhd: &WeightedNeighborhood, rng: &mut FrameRng) -> Result<Frame> {
    require_weight(nbhd)?;
    let w = weights(nbhd, rng);
    max_frame_with(nbhd, &w, FrameMethod::Max)
}

/// Principal axes of `Σ w r̄ r̄ᵀ`.
///
/// Eval mode orients each of the first two axes toward the neighbor with the
/// largest `w·|e·r̄|`; train mode picks random signs. A degenerate covariance
/// is retried with fresh noise in train mode and otherwise falls back to
/// [`max_frame`], flagged.
pub fn weighted_pca_frame(nbhd: &WeightedNeighborhood, rng: &mut FrameRng) -> Result<Frame> {
    require_weight(nbhd)?;
    let attempts = if rng.is_train() { PCA_RETRIES } else { 1 };
    for _ in 0..attempts {
        let w = weights(nbhd, rng);
        let mut cov = Matrix3::zeros();
        for (e, &wk) in nbhd.0.iter().zip(&w) {
            cov += e.dir * e.dir.transpose() * wk;
        }
        let eig = eig3_sym(&cov)?;
        if eig.degenerate {
            continue;
        }
        let [mut e1, mut e2, _] = eig.vectors;
        if rng.is_train() {
            e1 *= rng.sign();
            e2 *= rng.sign();
        } else {
            e1 = orient(&e1, nbhd, &w);
            e2 = orient(&e2, nbhd, &w);
        }
        return Ok(Frame {
            axes: [e1, e2, e1.cross(&e2)],
            kind: FrameMethod::WeightedPca,
            degenerate: false,
            fallback: false,
        });
    }
    let w = weights(nbhd, rng);
    let mut frame = max_frame_with(nbhd, &w, FrameMethod::WeightedPca)?;
    frame.degenerate = true;
    frame.fallback = true;
    Ok(frame)
}

fn orient(axis: &Vector3<f64>, nbhd: &WeightedNeighborhood, w: &[f64]) -> Vector3<f64> {
    let scores: Vec<f64> = nbhd.0.iter().zip(w).map(|(e, &wk)| wk * axis.dot(&e.dir).abs()).collect();
    match select(&scores, nbhd) {
        Some(k) if axis.dot(&nbhd.0[k].dir) < 0.0 => -axis,
        _ => *axis,
    }
}

/// Max frame over fixed weights `exp(-r²)`, eval mode.
pub fn static_local_frame(images: &[PeriodicImage]) -> Result<Frame> {
    let w: Vec<f64> = images.iter().map(|im| (-im.r * im.r).exp()).collect();
    let nbhd = WeightedNeighborhood::from_images(images, &w)?;
    require_weight(&nbhd)?;
    let w: Vec<f64> = nbhd.0.iter().map(|e| e.weight).collect();
    max_frame_with(&nbhd, &w, FrameMethod::StaticLocal)
}
