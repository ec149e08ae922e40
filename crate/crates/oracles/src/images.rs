use dynframe::crystal::CrystalStructure;
use nalgebra::Vector3;

/// One periodic copy of atom `j` seen from the center atom.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleImage {
    pub j: usize,
    pub displacement: Vector3<f64>,
    pub r: f64,
    /// Displacement in lattice coordinates.
    pub frac: Vector3<f64>,
}

/// Every image within `radius` of atom `center`, found by scanning a shift
/// box of at least `bounds`. The box grows when the radius demands it, so
/// coverage never depends on the caller's choice.
pub fn brute_force_images(s: &CrystalStructure, center: usize, radius: f64, bounds: [i32; 3]) -> Vec<OracleImage> {
    let m = s.lattice().matrix();
    let a = [m.column(0).into_owned(), m.column(1).into_owned(), m.column(2).into_owned()];
    let volume = a[0].dot(&a[1].cross(&a[2])).abs();
    let inv = m.try_inverse().expect("lattice is invertible");
    let fracs: Vec<Vector3<f64>> = s.positions().iter().map(|p| inv * p).collect();
    let mut reach = [0i32; 3];
    for k in 0..3 {
        let spacing = volume / a[(k + 1) % 3].cross(&a[(k + 2) % 3]).norm();
        let spread = fracs.iter().map(|f| (f[k] - fracs[center][k]).abs()).fold(0.0, f64::max);
        reach[k] = bounds[k].max((radius / spacing + spread).ceil() as i32 + 1);
    }
    let origin = s.positions()[center];
    let mut out = Vec::new();
    for (j, p) in s.positions().iter().enumerate() {
        for n0 in -reach[0]..=reach[0] {
            for n1 in -reach[1]..=reach[1] {
                for n2 in -reach[2]..=reach[2] {
                    let d = p + a[0] * n0 as f64 + a[1] * n1 as f64 + a[2] * n2 as f64 - origin;
                    let r = d.norm();
                    if r <= radius {
                        out.push(OracleImage { j, displacement: d, r, frac: inv * d });
                    }
                }
            }
        }
    }
    out
}
