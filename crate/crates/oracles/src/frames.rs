use nalgebra::{Matrix3, Vector3};

use crate::eigen::jacobi_eigen;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleFrameKind {
    Max,
    WeightedPca,
}

/// Scores within this relative distance of the maximum count as tied.
/// Looser than the encoder's tolerance so its choice is always covered.
const TIE: f64 = 1e-8;
/// Relative eigenvalue gap below which principal axes are not unique.
const EIGEN_GAP: f64 = 1e-6;

fn near_max(scores: &[f64]) -> Vec<usize> {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..scores.len())
        .filter(|&k| scores[k] >= best - TIE * best.abs())
        .collect()
}

fn max_frames(nbhd: &[(Vector3<f64>, f64)]) -> Vec<[Vector3<f64>; 3]> {
    let w: Vec<f64> = nbhd.iter().map(|n| n.1).collect();
    let mut out = Vec::new();
    for a in near_max(&w) {
        let e1 = nbhd[a].0;
        let second: Vec<f64> = nbhd.iter().map(|(d, wk)| (1.0 - e1.dot(d).abs()) * wk).collect();
        for b in near_max(&second) {
            let d = nbhd[b].0;
            let e2 = (d - e1 * e1.dot(&d)).normalize();
            out.push([e1, e2, e1.cross(&e2)]);
        }
    }
    out
}

/// Every frame the procedure can produce under some resolution of ties and
/// sign choices. Collinear neighborhoods (no valid second axis) are not
/// supported.
pub fn admissible_frames(nbhd: &[(Vector3<f64>, f64)], kind: OracleFrameKind) -> Vec<[Vector3<f64>; 3]> {
    match kind {
        OracleFrameKind::Max => max_frames(nbhd),
        OracleFrameKind::WeightedPca => {
            let mut cov = Matrix3::zeros();
            for (d, w) in nbhd {
                cov += d * d.transpose() * *w;
            }
            let eig = jacobi_eigen(&cov);
            let v = eig.values;
            let scale = v.iter().map(|x| x.abs()).sum::<f64>() + 1e-12;
            if (v[0] - v[1]).abs() < EIGEN_GAP * scale || (v[1] - v[2]).abs() < EIGEN_GAP * scale {
                // principal axes are not unique; the documented fallback applies
                return max_frames(nbhd);
            }
            let mut out = Vec::new();
            for s1 in [1.0, -1.0] {
                for s2 in [1.0, -1.0] {
                    let e1 = eig.vectors[0] * s1;
                    let e2 = eig.vectors[1] * s2;
                    out.push([e1, e2, e1.cross(&e2)]);
                }
            }
            out
        }
    }
}
