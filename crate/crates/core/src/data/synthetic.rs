use nalgebra::{Matrix3, Vector3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use super::DatasetRecord;
use crate::crystal::{CrystalStructure, Lattice, Species};
use crate::error::Result;
use crate::images::{enumerate_images, shift_range_for_radius};

/// Pair-potential cutoff in Å.
pub const LJ_CUTOFF: f64 = 6.0;

const LJ_DEPTH: f64 = 0.05;
const ANGULAR_WEIGHT: f64 = 0.2;
/// Neighbors count as first-shell when closer than this multiple of the
/// atom's nearest-neighbor distance (smoothly, via a logistic switch).
const SHELL_FACTOR: f64 = 1.2;
const SHELL_SOFTNESS: f64 = 0.05;
/// Beyond this margin past the shell edge the switch is below 1e-13.
const SHELL_MARGIN: f64 = 1.5;
/// Thermal-scale displacement cap in Å. Larger jitter makes the target too
/// rough for short desk-scale training runs to resolve.
const MAX_JITTER: f64 = 0.1;
const MAX_STRAIN: f64 = 0.03;
const RADIUS_SPREAD: f64 = 0.08;
/// Largest radius difference in Å between a cation and its substitute.
const MAX_SUBSTITUTE_MISMATCH: f64 = 0.3;
const MIN_EDGE: f64 = 3.01;
const MAX_EDGE: f64 = 6.99;

/// `(atomic number, radius in Å)`.
const CATIONS: [(u32, f64); 7] = [(3, 0.90), (11, 1.16), (19, 1.52), (12, 0.86), (20, 1.14), (30, 0.88), (31, 0.76)];
const ANIONS: [(u32, f64); 5] = [(8, 1.26), (9, 1.19), (16, 1.70), (17, 1.67), (34, 1.84)];

fn radius_of(z: u32) -> f64 {
    CATIONS
        .iter()
        .chain(ANIONS.iter())
        .find(|(s, _)| *s == z)
        .map(|(_, r)| *r)
        .unwrap_or(1.2)
}

/// Per-atom pair and three-body contributions of the synthetic target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetTerms {
    pub pair: f64,
    pub angular: f64,
}

impl TargetTerms {
    pub fn total(&self) -> f64 {
        self.pair + ANGULAR_WEIGHT * self.angular
    }
}

fn lj(za: u32, zb: u32, r: f64) -> f64 {
    let sigma = (radius_of(za) + radius_of(zb)) / 2f64.powf(1.0 / 6.0);
    let v = |x: f64| {
        let s6 = (sigma / x).powi(6);
        4.0 * LJ_DEPTH * (s6 * s6 - s6)
    };
    if r < LJ_CUTOFF {
        v(r) - v(LJ_CUTOFF)
    } else {
        0.0
    }
}

fn shell_weight(r: f64, r_min: f64) -> f64 {
    1.0 / (1.0 + ((r - SHELL_FACTOR * r_min) / SHELL_SOFTNESS).exp())
}

/// Neighbor `(species of j, displacement)` lists per atom within the cutoff.
fn terms_from_neighbors(s: &CrystalStructure, neighbors: &[Vec<(usize, Vector3<f64>)>]) -> TargetTerms {
    let n = s.len() as f64;
    let z: Vec<u32> = s.species().iter().map(|sp| sp.z() as u32).collect();
    let mut pair = 0.0;
    let mut angular = 0.0;
    for (i, list) in neighbors.iter().enumerate() {
        let r_min = list.iter().map(|(_, d)| d.norm()).fold(f64::INFINITY, f64::min);
        let mut shell = Vec::new();
        for (j, d) in list {
            let r = d.norm();
            pair += 0.5 * lj(z[i], z[*j], r);
            if r < SHELL_FACTOR * r_min + SHELL_MARGIN {
                shell.push((shell_weight(r, r_min), d / r));
            }
        }
        for a in 0..shell.len() {
            for b in (a + 1)..shell.len() {
                let c = shell[a].1.dot(&shell[b].1);
                angular += shell[a].0 * shell[b].0 * c * c;
            }
        }
    }
    TargetTerms {
        pair: pair / n,
        angular: angular / n,
    }
}

/// Per-atom target computed from [`enumerate_images`].
pub fn synthetic_target(s: &CrystalStructure) -> Result<TargetTerms> {
    let neighbors = (0..s.len())
        .map(|i| {
            Ok(enumerate_images(s, i, LJ_CUTOFF)?
                .into_iter()
                .filter(|im| !im.is_self())
                .map(|im| (im.j, im.displacement))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(terms_from_neighbors(s, &neighbors))
}

/// Same target from a plain loop over a wrapped copy and a fixed shift box.
pub fn synthetic_target_direct(s: &CrystalStructure) -> Result<TargetTerms> {
    let w = s.wrap_to_cell();
    let bounds = shift_range_for_radius(w.lattice(), LJ_CUTOFF)?.bounds();
    let l = w.lattice().matrix();
    let pos = w.positions();
    let mut neighbors = vec![Vec::new(); w.len()];
    for (i, list) in neighbors.iter_mut().enumerate() {
        for j in 0..w.len() {
            for a in -bounds[0]..=bounds[0] {
                for b in -bounds[1]..=bounds[1] {
                    for c in -bounds[2]..=bounds[2] {
                        let d = pos[j] + l * Vector3::new(a as f64, b as f64, c as f64) - pos[i];
                        let r = d.norm();
                        if r > 0.0 && r <= LJ_CUTOFF {
                            list.push((j, d));
                        }
                    }
                }
            }
        }
        // summation order as in the sorted enumeration keeps results comparable
        list.sort_by(|x: &(usize, Vector3<f64>), y| x.1.norm().total_cmp(&y.1.norm()));
    }
    Ok(terms_from_neighbors(&w, &neighbors))
}

#[derive(Clone, Copy, Debug)]
enum Prototype {
    RockSaltPrimitive,
    ZincBlendePrimitive,
    RockSaltTetragonal,
    RockSaltConventional,
    ZincBlendeConventional,
}

const PROTOTYPES: [Prototype; 5] = [
    Prototype::RockSaltPrimitive,
    Prototype::ZincBlendePrimitive,
    Prototype::RockSaltTetragonal,
    Prototype::RockSaltConventional,
    Prototype::ZincBlendeConventional,
];

/// Lattice columns in units of the nearest-neighbor distance, plus
/// fractional sites with a cation flag.
fn prototype_cell(p: Prototype) -> (Matrix3<f64>, Vec<([f64; 3], bool)>) {
    let fcc = |a: f64| Matrix3::new(0.0, a / 2.0, a / 2.0, a / 2.0, 0.0, a / 2.0, a / 2.0, a / 2.0, 0.0);
    match p {
        Prototype::RockSaltPrimitive => (fcc(2.0), vec![([0.0; 3], true), ([0.5; 3], false)]),
        Prototype::ZincBlendePrimitive => (fcc(4.0 / 3f64.sqrt()), vec![([0.0; 3], true), ([0.25; 3], false)]),
        Prototype::RockSaltTetragonal => {
            let a = 2f64.sqrt();
            (
                Matrix3::from_diagonal(&Vector3::new(a, a, 2.0)),
                vec![
                    ([0.0, 0.0, 0.0], true),
                    ([0.5, 0.5, 0.5], true),
                    ([0.5, 0.5, 0.0], false),
                    ([0.0, 0.0, 0.5], false),
                ],
            )
        }
        Prototype::RockSaltConventional => {
            let mut sites = Vec::new();
            for f in [[0.0, 0.0, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]] {
                sites.push((f, true));
                sites.push(([f[0] + 0.5, f[1], f[2]], false));
            }
            (Matrix3::from_diagonal_element(2.0), sites)
        }
        Prototype::ZincBlendeConventional => {
            let mut sites = Vec::new();
            for f in [[0.0, 0.0, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]] {
                sites.push((f, true));
                sites.push(([f[0] + 0.25, f[1] + 0.25, f[2] + 0.25], false));
            }
            (Matrix3::from_diagonal_element(4.0 / 3f64.sqrt()), sites)
        }
    }
}

fn random_structure(rng: &mut ChaCha8Rng) -> Result<CrystalStructure> {
    let proto = *PROTOTYPES.choose(rng).expect("non-empty");
    let (cell, sites) = prototype_cell(proto);
    // ion pairs too large for the cell window would be squeezed into
    // strongly repulsive contacts, so redraw them
    let longest_unit = cell.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let (cation, anion) = loop {
        let c = *CATIONS.choose(rng).expect("non-empty");
        let a = *ANIONS.choose(rng).expect("non-empty");
        if longest_unit * (c.1 + a.1) * (1.0 + RADIUS_SPREAD + 2.0 * MAX_STRAIN) <= MAX_EDGE {
            break (c, a);
        }
    };
    let nn = (cation.1 + anion.1) * (1.0 + rng.random_range(-RADIUS_SPREAD..=RADIUS_SPREAD));
    let mut strain = Matrix3::<f64>::identity();
    for r in 0..3 {
        for c in r..3 {
            let e: f64 = rng.random_range(-MAX_STRAIN..=MAX_STRAIN);
            strain[(r, c)] += e;
            if r != c {
                strain[(c, r)] += e;
            }
        }
    }
    let cols = strain * cell * nn;
    let edges: Vec<f64> = cols.column_iter().map(|c| c.norm()).collect();
    let longest = edges.iter().copied().fold(0.0, f64::max);
    let shortest = edges.iter().copied().fold(f64::INFINITY, f64::min);
    // rescale so every edge stays inside the supported 3 to 7 Å window
    let fit = if longest > MAX_EDGE {
        MAX_EDGE / longest
    } else if shortest < MIN_EDGE {
        MIN_EDGE / shortest
    } else {
        1.0
    };
    let lattice = Lattice::new(cols * fit)?;
    let cation_sites = sites.iter().filter(|(_, c)| *c).count();
    let substitute = if cation_sites > 1 && rng.random_bool(0.5) {
        let similar: Vec<_> = CATIONS
            .iter()
            .filter(|c| c.0 != cation.0 && (c.1 - cation.1).abs() <= MAX_SUBSTITUTE_MISMATCH)
            .collect();
        similar.choose(rng).copied().copied()
    } else {
        None
    };
    let mut species = Vec::new();
    let mut positions = Vec::new();
    let mut substituted = false;
    for (f, is_cation) in &sites {
        let z = match (is_cation, substitute) {
            (true, Some(other)) if !substituted || rng.random_bool(0.3) => {
                substituted = true;
                other.0
            }
            (true, _) => cation.0,
            (false, _) => anion.0,
        };
        let dir: [f64; 3] = UnitSphere.sample(rng);
        let jitter = Vector3::from(dir) * rng.random_range(0.0..=MAX_JITTER);
        species.push(Species::new(z)?);
        positions.push(lattice.to_cartesian(&Vector3::from(*f)) + jitter);
    }
    Ok(CrystalStructure::new(species, positions, lattice)?.wrap_to_cell())
}

/// `n` perturbed rock-salt and zinc-blende style cells with a per-atom
/// Lennard-Jones plus first-shell `cos²` target.
pub fn gen_synthetic(n: usize, seed: u64) -> Result<Vec<DatasetRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let s = random_structure(&mut rng)?;
            let target = synthetic_target(&s)?.total();
            Ok(DatasetRecord::from_structure(format!("syn-{seed}-{k}"), &s, target))
        })
        .collect()
}
