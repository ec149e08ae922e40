//! Enumeration of periodic neighbor images and short lattice vectors.

use std::cmp::Ordering;

use nalgebra::Vector3;

use crate::crystal::{CrystalStructure, Lattice};
use crate::error::{Error, Result};

/// Relative tolerance under which two lengths count as tied.
pub const TIE_TOLERANCE: f64 = 1e-10;

/// Image `j(n)` of atom `j` shifted by `L n`, seen from a center atom.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicImage {
    pub j: usize,
    pub shift: [i32; 3],
    /// `p_j + L n - p_i`.
    pub displacement: Vector3<f64>,
    pub r: f64,
    /// Unit direction; `None` for a zero-length displacement.
    pub dir: Option<Vector3<f64>>,
    /// Displacement in lattice coordinates, `f_j - f_i + n`. Independent of
    /// rotations, atom order, re-wrapping and (up to a positive diagonal
    /// scaling) diagonal supercells, which makes it a stable tie-break key.
    pub frac: Vector3<f64>,
}

impl PeriodicImage {
    pub fn is_self(&self) -> bool {
        self.dir.is_none()
    }
}

/// Symmetric per-axis shift bounds `-b_k..=b_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftRange(pub [i32; 3]);

impl ShiftRange {
    pub fn bounds(&self) -> [i32; 3] {
        self.0
    }

    pub fn shifts(&self) -> impl Iterator<Item = [i32; 3]> + '_ {
        let [a, b, c] = self.0;
        (-a..=a).flat_map(move |x| (-b..=b).flat_map(move |y| (-c..=c).map(move |z| [x, y, z])))
    }
}

/// `b_k = ceil(radius / h_k) + 1` with `h_k` the plane spacing along axis `k`.
pub fn shift_range_for_radius(lattice: &Lattice, radius: f64) -> Result<ShiftRange> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("radius must be positive and finite, got {radius}")));
    }
    let mut b = [0i32; 3];
    for (k, bk) in b.iter_mut().enumerate() {
        let steps = (radius / lattice.plane_spacing(k)).ceil();
        if steps > 1e6 {
            return Err(Error::Geometry(format!(
                "radius {radius} needs more than 1e6 cells along axis {k}"
            )));
        }
        *bk = steps as i32 + 1;
    }
    Ok(ShiftRange(b))
}

/// Compares two vectors component by component, treating components within
/// `TIE_TOLERANCE` as equal.
pub fn lex_cmp(a: &Vector3<f64>, b: &Vector3<f64>) -> Ordering {
    for k in 0..3 {
        if (a[k] - b[k]).abs() > TIE_TOLERANCE * (1.0 + a[k].abs().max(b[k].abs())) {
            return a[k].total_cmp(&b[k]);
        }
    }
    Ordering::Equal
}

/// Whether two nonnegative lengths agree within the relative tie tolerance.
pub fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs()).max(1e-300)
}

/// Sorts by length, then runs of tied lengths by `tiebreak`.
fn sort_with_ties<T>(items: &mut [T], len: impl Fn(&T) -> f64, tiebreak: impl Fn(&T, &T) -> Ordering) {
    items.sort_by(|a, b| len(a).total_cmp(&len(b)));
    let mut start = 0;
    while start < items.len() {
        let head = len(&items[start]);
        let mut end = start + 1;
        while end < items.len() && tied(len(&items[end]), head) {
            end += 1;
        }
        items[start..end].sort_by(&tiebreak);
        start = end;
    }
}

fn image_tiebreak(a: &PeriodicImage, b: &PeriodicImage) -> Ordering {
    let zero = Vector3::zeros();
    lex_cmp(a.dir.as_ref().unwrap_or(&zero), b.dir.as_ref().unwrap_or(&zero))
        .then(a.j.cmp(&b.j))
        .then(a.shift.cmp(&b.shift))
}

/// All images `j(n)` with `r <= radius` around atom `center`, self image
/// included, sorted by distance with ties ordered by direction then `(j, n)`.
///
/// Positions need not be wrapped: the shift box is re-centered per pair.
pub fn enumerate_images(structure: &CrystalStructure, center: usize, radius: f64) -> Result<Vec<PeriodicImage>> {
    if center >= structure.len() {
        return Err(Error::invalid(format!(
            "atom index {center} out of range for {} atoms",
            structure.len()
        )));
    }
    let lattice = structure.lattice();
    let range = shift_range_for_radius(lattice, radius)?;
    let frac = structure.fractional();
    let pos = structure.positions();
    let l = lattice.matrix();
    let mut out = Vec::new();
    for j in 0..structure.len() {
        let fd = frac[j] - frac[center];
        let base = fd.map(|v| -v.round());
        let rel = pos[j] - pos[center];
        for m in range.shifts() {
            let n = [
                base[0] as i32 + m[0],
                base[1] as i32 + m[1],
                base[2] as i32 + m[2],
            ];
            let nf = Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
            let displacement = rel + l * nf;
            let r = displacement.norm();
            if r > radius {
                continue;
            }
            let dir = (r > 0.0).then(|| displacement / r);
            out.push(PeriodicImage {
                j,
                shift: n,
                displacement,
                r,
                dir,
                frac: fd + nf,
            });
        }
    }
    sort_with_ties(&mut out, |im| im.r, image_tiebreak);
    Ok(out)
}

/// Nonzero lattice translation `L n`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticePoint {
    pub n: [i32; 3],
    pub vector: Vector3<f64>,
    pub norm: f64,
}

/// Every nonzero `L n` with `|n_k| <= bound`, shortest first; ties ordered by
/// direction like [`enumerate_images`].
pub fn sorted_lattice_points(lattice: &Lattice, bound: i32) -> Result<Vec<LatticePoint>> {
    if bound < 1 {
        return Err(Error::invalid(format!("lattice search bound must be >= 1, got {bound}")));
    }
    let mut out: Vec<LatticePoint> = ShiftRange([bound; 3])
        .shifts()
        .filter(|n| *n != [0, 0, 0])
        .map(|n| {
            let vector = lattice.matrix() * Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
            LatticePoint {
                n,
                norm: vector.norm(),
                vector,
            }
        })
        .collect();
    sort_with_ties(
        &mut out,
        |p| p.norm,
        |a, b| lex_cmp(&(a.vector / a.norm), &(b.vector / b.norm)).then(a.n.cmp(&b.n)),
    );
    Ok(out)
}
