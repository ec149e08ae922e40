use nalgebra::{Matrix3, Vector3};

use super::{eig3_sym, Frame, FrameMethod, FrameRng, PCA_RETRIES};
use crate::crystal::Lattice;
use crate::error::{Error, Result};
use crate::images::sorted_lattice_points;

/// Search bound for short lattice vectors.
pub const LATTICE_SEARCH_BOUND: i32 = 3;

/// The four sign choices with `det = +1` of the principal axes of the
/// centered point cloud.
///
/// A degenerate covariance is re-estimated with per-point multiplicative
/// noise drawn from `rng` (train or eval alike); if it stays degenerate the
/// solver's orthonormal basis is used and the frames are flagged.
pub fn pca_frames(points: &[Vector3<f64>], rng: &mut FrameRng) -> Result<Vec<Frame>> {
    if points.is_empty() {
        return Err(Error::invalid("PCA frames need at least one point"));
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let covariance = |noise: &mut dyn FnMut() -> f64| {
        let mut c = Matrix3::zeros();
        for p in points {
            let d = p - centroid;
            c += d * d.transpose() * noise();
        }
        c / n
    };
    let mut eig = eig3_sym(&covariance(&mut || 1.0))?;
    let degenerate = eig.degenerate;
    for _ in 0..PCA_RETRIES {
        if !eig.degenerate {
            break;
        }
        eig = eig3_sym(&covariance(&mut || rng.noise_factor()))?;
    }
    let [e1, e2, _] = eig.vectors;
    Ok([(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
        .into_iter()
        .map(|(s1, s2)| {
            let a = e1 * s1;
            let b = e2 * s2;
            Frame {
                axes: [a, b, a.cross(&b)],
                kind: FrameMethod::Pca,
                degenerate,
                fallback: eig.degenerate,
            }
        })
        .collect())
}

/// Shortest lattice vector, then the next shortest vectors completing a
/// full-rank set, normalized and sign-fixed so `e1·e2 >= 0`, `e1·e3 >= 0`
/// and `det > 0`.
pub fn lattice_frame(lattice: &Lattice) -> Result<Frame> {
    let points = sorted_lattice_points(lattice, LATTICE_SEARCH_BOUND)?;
    let scale = points[0].norm;
    let mut chosen: Vec<Vector3<f64>> = Vec::with_capacity(3);
    for p in &points {
        let u = p.vector / p.norm;
        let independent = match chosen.len() {
            0 => true,
            1 => chosen[0].cross(&u).norm() > 1e-8,
            _ => chosen[0].cross(&chosen[1]).dot(&u).abs() > 1e-8,
        };
        if independent {
            chosen.push(u);
            if chosen.len() == 3 {
                break;
            }
        }
    }
    if chosen.len() < 3 {
        return Err(Error::Geometry(format!(
            "no three independent lattice vectors within bound {LATTICE_SEARCH_BOUND} (shortest {scale})"
        )));
    }
    let e1 = chosen[0];
    let mut e2 = chosen[1];
    let mut e3 = chosen[2];
    if e1.dot(&e2) < 0.0 {
        e2 = -e2;
    }
    if e1.dot(&e3) < 0.0 {
        e3 = -e3;
    }
    let mut axes = [e1, e2, e3];
    if e1.dot(&e2.cross(&e3)) < 0.0 {
        axes = [-e1, -e2, -e3];
    }
    Ok(Frame {
        axes,
        kind: FrameMethod::Lattice,
        degenerate: false,
        fallback: false,
    })
}

/// Uniform mean of per-frame outputs.
pub fn frame_average(outputs: &[f64]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::invalid("frame average over an empty frame set"));
    }
    Ok(outputs.iter().sum::<f64>() / outputs.len() as f64)
}
