//! Periodic crystal structures and the transformations used to probe invariance.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Smallest accepted cell volume in Å³.
pub const MIN_CELL_VOLUME: f64 = 1e-6;

/// Largest atomic number with an embedding row.
pub const MAX_SPECIES: u8 = 98;

/// Atomic number in `1..=MAX_SPECIES`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Species(u8);

impl Species {
    pub fn new(z: u32) -> Result<Self> {
        if z == 0 || z > MAX_SPECIES as u32 {
            return Err(Error::Geometry(format!(
                "atomic number {z} outside 1..={MAX_SPECIES}"
            )));
        }
        Ok(Species(z as u8))
    }

    pub fn z(self) -> u8 {
        self.0
    }

    /// Zero-based row in the embedding table.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

/// Occupancy probabilities of a disordered site.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeciesDistribution(BTreeMap<Species, f64>);

impl SpeciesDistribution {
    pub fn new(entries: impl IntoIterator<Item = (Species, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (s, p) in entries {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::Geometry(format!(
                    "occupancy of species {} must be a nonnegative number, got {p}",
                    s.z()
                )));
            }
            *map.entry(s).or_insert(0.0) += p;
        }
        let total: f64 = map.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Geometry(format!("occupancies sum to {total}, not 1")));
        }
        Ok(SpeciesDistribution(map))
    }

    pub fn pure(s: Species) -> Self {
        SpeciesDistribution(BTreeMap::from([(s, 1.0)]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Species, f64)> + '_ {
        self.0.iter().map(|(s, p)| (*s, *p))
    }

    /// Species with the largest probability (lowest atomic number on ties).
    pub fn dominant(&self) -> Species {
        let mut best: Option<(Species, f64)> = None;
        for (s, p) in self.iter() {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((s, p));
            }
        }
        best.map(|(s, _)| s).expect("distribution is never empty")
    }
}

/// Lattice with column vectors `L = [l1 l2 l3]` and a cached inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    cols: Matrix3<f64>,
    inv: Matrix3<f64>,
}

impl Lattice {
    /// Builds a right-handed lattice; `det(L)` must exceed [`MIN_CELL_VOLUME`].
    pub fn new(cols: Matrix3<f64>) -> Result<Self> {
        if !cols.iter().all(|v| v.is_finite()) {
            return Err(Error::Geometry("lattice has non-finite entries".into()));
        }
        let det = cols.determinant();
        if det <= MIN_CELL_VOLUME {
            return Err(Error::Geometry(format!(
                "lattice determinant {det} is not above {MIN_CELL_VOLUME}"
            )));
        }
        let inv = cols
            .try_inverse()
            .ok_or_else(|| Error::Geometry("singular lattice".into()))?;
        Ok(Lattice { cols, inv })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Lattice::new(Matrix3::from_fn(|r, c| rows[c][r]))
    }

    pub fn cubic(a: f64) -> Result<Self> {
        Lattice::new(Matrix3::from_diagonal_element(a))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.cols
    }

    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.inv
    }

    pub fn vector(&self, k: usize) -> Vector3<f64> {
        self.cols.column(k).into_owned()
    }

    pub fn volume(&self) -> f64 {
        self.cols.determinant()
    }

    pub fn to_fractional(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.inv * p
    }

    pub fn to_cartesian(&self, f: &Vector3<f64>) -> Vector3<f64> {
        self.cols * f
    }

    /// Distance between the lattice planes spanned by the other two vectors.
    pub fn plane_spacing(&self, k: usize) -> f64 {
        let a = self.vector((k + 1) % 3);
        let b = self.vector((k + 2) % 3);
        self.volume() / a.cross(&b).norm()
    }
}

/// Unit cell contents plus lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct CrystalStructure {
    species: Vec<Species>,
    positions: Vec<Vector3<f64>>,
    lattice: Lattice,
    occupancies: Option<Vec<SpeciesDistribution>>,
}

impl CrystalStructure {
    pub fn new(species: Vec<Species>, positions: Vec<Vector3<f64>>, lattice: Lattice) -> Result<Self> {
        if species.is_empty() {
            return Err(Error::Geometry("structure has no atoms".into()));
        }
        if species.len() != positions.len() {
            return Err(Error::Geometry(format!(
                "{} species but {} positions",
                species.len(),
                positions.len()
            )));
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Geometry("non-finite atom position".into()));
        }
        Ok(CrystalStructure {
            species,
            positions,
            lattice,
            occupancies: None,
        })
    }

    /// Attaches per-site occupancies; the species list keeps the dominant
    /// species of each site.
    pub fn with_occupancies(mut self, occ: Vec<SpeciesDistribution>) -> Result<Self> {
        if occ.len() != self.species.len() {
            return Err(Error::Geometry(format!(
                "{} occupancy entries for {} sites",
                occ.len(),
                self.species.len()
            )));
        }
        self.species = occ.iter().map(SpeciesDistribution::dominant).collect();
        self.occupancies = Some(occ);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    pub fn species(&self) -> &[Species] {
        &self.species
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn occupancies(&self) -> Option<&[SpeciesDistribution]> {
        self.occupancies.as_deref()
    }

    /// Site composition, pure or mixed.
    pub fn site_distribution(&self, i: usize) -> SpeciesDistribution {
        match &self.occupancies {
            Some(occ) => occ[i].clone(),
            None => SpeciesDistribution::pure(self.species[i]),
        }
    }

    pub fn fractional(&self) -> Vec<Vector3<f64>> {
        self.positions.iter().map(|p| self.lattice.to_fractional(p)).collect()
    }

    /// Moves every atom into the cell so fractional coordinates lie in `[0, 1)`.
    pub fn wrap_to_cell(&self) -> CrystalStructure {
        let positions = self
            .positions
            .iter()
            .map(|p| {
                let f = self.lattice.to_fractional(p).map(wrap_unit);
                self.lattice.to_cartesian(&f)
            })
            .collect();
        CrystalStructure {
            positions,
            ..self.clone()
        }
    }

    /// Tiles the cell `m1 × m2 × m3` times. Atoms are ordered by tile, then
    /// by original index.
    pub fn make_supercell(&self, factors: [usize; 3]) -> Result<CrystalStructure> {
        if factors.contains(&0) {
            return Err(Error::Geometry(format!("supercell factors must be positive, got {factors:?}")));
        }
        let l = self.lattice.matrix();
        let mut cols = *l;
        for (k, &m) in factors.iter().enumerate() {
            cols.set_column(k, &(l.column(k) * m as f64));
        }
        let lattice = Lattice::new(cols)?;
        let mut species = Vec::new();
        let mut positions = Vec::new();
        let mut occ = self.occupancies.as_ref().map(|_| Vec::new());
        for t0 in 0..factors[0] {
            for t1 in 0..factors[1] {
                for t2 in 0..factors[2] {
                    let shift = l * Vector3::new(t0 as f64, t1 as f64, t2 as f64);
                    for i in 0..self.len() {
                        species.push(self.species[i]);
                        positions.push(self.positions[i] + shift);
                        if let (Some(out), Some(src)) = (occ.as_mut(), self.occupancies.as_ref()) {
                            out.push(src[i].clone());
                        }
                    }
                }
            }
        }
        Ok(CrystalStructure {
            species,
            positions,
            lattice,
            occupancies: occ,
        })
    }

    /// Applies `p -> R p + t` and `L -> R L`.
    pub fn rigid_transform(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Result<CrystalStructure> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.iter().any(|v| v.abs() > 1e-10) || (rotation.determinant() - 1.0).abs() > 1e-10 {
            return Err(Error::Geometry("rotation is not orthonormal with det +1".into()));
        }
        let lattice = Lattice::new(rotation * self.lattice.matrix())?;
        let positions = self.positions.iter().map(|p| rotation * p + translation).collect();
        Ok(CrystalStructure {
            positions,
            lattice,
            ..self.clone()
        })
    }

    /// Reorders atoms: new atom `k` is old atom `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<CrystalStructure> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || order.iter().any(|&k| k >= self.len() || std::mem::replace(&mut seen[k], true)) {
            return Err(Error::invalid("permutation must list every atom exactly once"));
        }
        Ok(CrystalStructure {
            species: order.iter().map(|&k| self.species[k]).collect(),
            positions: order.iter().map(|&k| self.positions[k]).collect(),
            lattice: self.lattice.clone(),
            occupancies: self
                .occupancies
                .as_ref()
                .map(|o| order.iter().map(|&k| o[k].clone()).collect()),
        })
    }

    /// Copy with atom `i` moved by `delta` (Cartesian, Å).
    pub fn displaced(&self, i: usize, delta: &Vector3<f64>) -> Result<CrystalStructure> {
        if i >= self.len() {
            return Err(Error::invalid(format!("atom index {i} out of range for {} atoms", self.len())));
        }
        let mut out = self.clone();
        out.positions[i] += delta;
        Ok(out)
    }
}

fn wrap_unit(x: f64) -> f64 {
    let w = x - x.floor();
    // x slightly below an integer can round up to exactly 1.0
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}
