use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};

/// Relative gap under which two eigenvalues count as coincident.
pub const DEGENERACY_TOLERANCE: f64 = 1e-6;

/// Eigen-decomposition of a symmetric 3x3 matrix, eigenvalues descending.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricEigen3 {
    pub values: [f64; 3],
    /// Orthonormal eigenvectors, `vectors[k]` pairs with `values[k]`.
    pub vectors: [Vector3<f64>; 3],
    pub degenerate: bool,
}

/// Closed-form symmetric 3x3 eigensolver.
///
/// Eigenvalues come from the trigonometric solution of the characteristic
/// cubic; the eigenvector of the best-separated eigenvalue is taken from the
/// largest cross product of rows of `M - λI`, the second from a 2x2 problem in
/// its orthogonal complement and the third by cross product.
pub fn eig3_sym(m: &Matrix3<f64>) -> Result<SymmetricEigen3> {
    let max_abs = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !max_abs.is_finite() {
        return Err(Error::Numeric("non-finite matrix in eigensolver".into()));
    }
    for (r, c) in [(0, 1), (0, 2), (1, 2)] {
        if (m[(r, c)] - m[(c, r)]).abs() > 1e-9 * (1.0 + max_abs) {
            return Err(Error::invalid(format!(
                "matrix is not symmetric: entries ({r},{c}) and ({c},{r}) differ"
            )));
        }
    }
    let sym = (m + m.transpose()) * 0.5;
    if max_abs == 0.0 {
        return Ok(finish(&sym, axes()));
    }
    let a = sym / max_abs;
    let q = a.trace() / 3.0;
    let b = a - Matrix3::identity() * q;
    let p2 = b.norm_squared() / 6.0;
    if p2 <= 1e-30 {
        return Ok(finish(&sym, axes()));
    }
    let p = p2.sqrt();
    let half_det = ((b / p).determinant() * 0.5).clamp(-1.0, 1.0);
    let angle = half_det.acos() / 3.0;
    // roots of the normalized cubic, beta_hi >= beta_mid >= beta_lo
    let beta_hi = 2.0 * angle.cos();
    let beta_lo = 2.0 * (angle + 2.0 * PI / 3.0).cos();
    let beta_mid = -(beta_hi + beta_lo);
    let (first, second) = if half_det >= 0.0 {
        (q + p * beta_hi, q + p * beta_mid)
    } else {
        (q + p * beta_lo, q + p * beta_mid)
    };
    let v0 = isolated_vector(&a, first);
    let v1 = complement_vector(&a, &v0, second);
    let v2 = v0.cross(&v1).normalize();
    let (v1, v2) = rotate_within_plane(&sym, v1, v2);
    Ok(finish(&sym, [v0, v1, v2]))
}

fn axes() -> [Vector3<f64>; 3] {
    [Vector3::x(), Vector3::y(), Vector3::z()]
}

/// Rayleigh quotients, descending order, degeneracy flag.
fn finish(m: &Matrix3<f64>, vectors: [Vector3<f64>; 3]) -> SymmetricEigen3 {
    let mut pairs: Vec<(f64, Vector3<f64>)> = vectors.iter().map(|v| (v.dot(&(m * v)), *v)).collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    let values = [pairs[0].0, pairs[1].0, pairs[2].0];
    let scale = m.trace().abs() + 1e-12;
    let degenerate = (0..3).any(|i| ((i + 1)..3).any(|j| (values[i] - values[j]).abs() < DEGENERACY_TOLERANCE * scale));
    SymmetricEigen3 {
        values,
        vectors: [pairs[0].1, pairs[1].1, pairs[2].1],
        degenerate,
    }
}

/// Exact 2x2 diagonalization of `m` restricted to the plane of `u` and `w`.
/// When the two remaining eigenvalues nearly coincide, the vectors found from
/// an approximate eigenvalue are an arbitrary mix; this pins them down.
fn rotate_within_plane(m: &Matrix3<f64>, u: Vector3<f64>, w: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let (a, b, c) = (u.dot(&(m * u)), u.dot(&(m * w)), w.dot(&(m * w)));
    let phi = 0.5 * (2.0 * b).atan2(a - c);
    let (sin, cos) = phi.sin_cos();
    ((u * cos + w * sin).normalize(), (w * cos - u * sin).normalize())
}

fn isolated_vector(a: &Matrix3<f64>, value: f64) -> Vector3<f64> {
    let s = a - Matrix3::identity() * value;
    let rows: [Vector3<f64>; 3] = [s.row(0).transpose(), s.row(1).transpose(), s.row(2).transpose()];
    let crosses = [rows[0].cross(&rows[1]), rows[0].cross(&rows[2]), rows[1].cross(&rows[2])];
    let best = crosses
        .iter()
        .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))
        .copied()
        .unwrap_or_else(Vector3::x);
    if best.norm_squared() > 0.0 {
        best.normalize()
    } else {
        Vector3::x()
    }
}

/// Unit vector orthogonal to `v`, built from its largest components.
fn orthogonal_unit(v: &Vector3<f64>) -> Vector3<f64> {
    if v.x.abs() > v.y.abs() {
        Vector3::new(-v.z, 0.0, v.x) / (v.x * v.x + v.z * v.z).sqrt()
    } else {
        Vector3::new(0.0, v.z, -v.y) / (v.y * v.y + v.z * v.z).sqrt()
    }
}

fn complement_vector(a: &Matrix3<f64>, v0: &Vector3<f64>, value: f64) -> Vector3<f64> {
    let u = orthogonal_unit(v0);
    let w = v0.cross(&u);
    let s = a - Matrix3::identity() * value;
    let au = s * u;
    let aw = s * w;
    let m = Matrix2::new(u.dot(&au), u.dot(&aw), w.dot(&au), w.dot(&aw));
    let (m00, m01, m11) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let (abs00, abs01, abs11) = (m00.abs(), m01.abs(), m11.abs());
    if abs00.max(abs01).max(abs11) == 0.0 {
        return u;
    }
    let (cu, cw) = if abs00 >= abs11 {
        let hyp = (m00 * m00 + m01 * m01).sqrt();
        (-m01 / hyp, m00 / hyp)
    } else {
        let hyp = (m11 * m11 + m01 * m01).sqrt();
        (m11 / hyp, -m01 / hyp)
    };
    (u * cu + w * cw).normalize()
}
