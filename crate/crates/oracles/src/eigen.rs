use nalgebra::{Matrix3, Vector3};

/// Eigenpairs sorted by decreasing eigenvalue.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobiEigen {
    pub values: [f64; 3],
    pub vectors: [Vector3<f64>; 3],
    pub sweeps: usize,
}

const OFF_DIAGONAL_TARGET: f64 = 1e-14;
const MAX_SWEEPS: usize = 100;

/// Classical cyclic Jacobi rotations until the off-diagonal norm drops
/// below 1e-14 relative to the matrix scale (absolute for tiny matrices).
pub fn jacobi_eigen(m: &Matrix3<f64>) -> JacobiEigen {
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = Matrix3::<f64>::identity();
    let scale = a.norm().max(1.0);
    let off = |a: &Matrix3<f64>| (2.0 * (a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2))).sqrt();
    let mut sweeps = 0;
    while off(&a) >= OFF_DIAGONAL_TARGET * scale && sweeps < MAX_SWEEPS {
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[(p, q)] == 0.0 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = Matrix3::<f64>::identity();
            rot[(p, p)] = c;
            rot[(q, q)] = c;
            rot[(p, q)] = s;
            rot[(q, p)] = -s;
            a = rot.transpose() * a * rot;
            v *= rot;
        }
        sweeps += 1;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]));
    JacobiEigen {
        values: order.map(|k| a[(k, k)]),
        vectors: order.map(|k| v.column(k).into_owned()),
        sweeps,
    }
}
