//! Random inputs shared by the cross-check and acceptance tests.

use dynframe::crystal::{CrystalStructure, Lattice, Species};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

/// Closest allowed approach between two atoms in a random cell, in Å.
const MIN_SEPARATION: f64 = 1.5;

pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let mut c = || -> f64 { StandardNormal.sample(rng) };
    let q = Quaternion::new(c(), c(), c(), c());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

pub fn random_vector(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
}

pub fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::from(UnitSphere.sample(rng))
}

/// Triclinic cell with edges of 3 to 6 Å, angles of 70° to 110°, and
/// `1..=max_atoms` atoms kept at least 1.5 Å apart (periodically).
pub fn random_structure(rng: &mut impl Rng, max_atoms: usize) -> CrystalStructure {
    loop {
        let (a, b, c) = (rng.random_range(3.0..6.0), rng.random_range(3.0..6.0), rng.random_range(3.0..6.0));
        let deg = |rng: &mut dyn rand::RngCore| rng.random_range(70f64..110.0).to_radians();
        let (alpha, beta, gamma) = (deg(rng), deg(rng), deg(rng));
        let cx = beta.cos();
        let cy = (alpha.cos() - beta.cos() * gamma.cos()) / gamma.sin();
        let cz2 = 1.0 - cx * cx - cy * cy;
        if cz2 < 0.1 {
            continue;
        }
        let rows = [
            [a, 0.0, 0.0],
            [b * gamma.cos(), b * gamma.sin(), 0.0],
            [c * cx, c * cy, c * cz2.sqrt()],
        ];
        let lattice = Lattice::from_rows(rows).expect("positive volume");
        let n = rng.random_range(1..=max_atoms);
        let mut frac: Vec<Vector3<f64>> = Vec::new();
        let mut tries = 0;
        while frac.len() < n && tries < 200 {
            tries += 1;
            let f = Vector3::from_fn(|_, _| rng.random_range(0.0..1.0));
            let clear = frac.iter().all(|g| {
                let mut d = f - g;
                d.apply(|x| *x -= x.round());
                lattice.to_cartesian(&d).norm() >= MIN_SEPARATION
            });
            if clear {
                frac.push(f);
            }
        }
        if frac.len() < n {
            continue;
        }
        let species = (0..n)
            .map(|_| Species::new(rng.random_range(1..=40)).expect("valid atomic number"))
            .collect();
        let positions = frac.iter().map(|f| lattice.to_cartesian(f)).collect();
        return CrystalStructure::new(species, positions, lattice).expect("valid structure");
    }
}

/// `3..=max_len` unit directions with positive weights summing to one.
pub fn random_neighborhood(rng: &mut impl Rng, max_len: usize) -> Vec<(Vector3<f64>, f64)> {
    let n = rng.random_range(3..=max_len);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| (random_unit(rng), w / total)).collect()
}
