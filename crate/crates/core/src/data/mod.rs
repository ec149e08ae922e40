//! Line-delimited dataset files, deterministic splits and synthetic data.

mod synthetic;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crystal::{CrystalStructure, Lattice, Species, SpeciesDistribution};
use crate::error::{Error, Result};

pub use synthetic::{gen_synthetic, synthetic_target, synthetic_target_direct, TargetTerms, LJ_CUTOFF};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordsKind {
    Cartesian,
    Fractional,
}

/// One material as stored on disk. `lattice` lists the three lattice
/// vectors one after another (`a_x a_y a_z b_x ...`), in Å.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub lattice: [f64; 9],
    pub species: Vec<u32>,
    pub positions: Vec<[f64; 3]>,
    pub coords_kind: CoordsKind,
    pub target: f64,
    /// Per-site `(atomic number, probability)` lists for disordered sites.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupancies: Option<Vec<Vec<(u32, f64)>>>,
}

impl DatasetRecord {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Record {
            id: self.id.clone(),
            detail: detail.into(),
        }
    }

    /// Validated, wrapped structure. A left-handed lattice is replaced by its
    /// negation, which spans the same translations.
    pub fn to_structure(&self) -> Result<CrystalStructure> {
        if !self.target.is_finite() {
            return Err(self.fail("target is not finite"));
        }
        if self.species.len() != self.positions.len() {
            return Err(self.fail(format!(
                "{} species but {} positions",
                self.species.len(),
                self.positions.len()
            )));
        }
        let l = &self.lattice;
        let mut cols = Matrix3::from_fn(|r, c| l[3 * c + r]);
        if cols.determinant() < 0.0 {
            cols = -cols;
        }
        let lattice = Lattice::new(cols).map_err(|e| self.fail(e.to_string()))?;
        let species = self
            .species
            .iter()
            .map(|&z| Species::new(z))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| self.fail(e.to_string()))?;
        let positions = self
            .positions
            .iter()
            .map(|p| {
                let v = Vector3::from(*p);
                match self.coords_kind {
                    CoordsKind::Cartesian => v,
                    CoordsKind::Fractional => lattice.to_cartesian(&v),
                }
            })
            .collect();
        let mut s = CrystalStructure::new(species, positions, lattice).map_err(|e| self.fail(e.to_string()))?;
        if let Some(occ) = &self.occupancies {
            let dists = occ
                .iter()
                .map(|site| {
                    let entries = site
                        .iter()
                        .map(|&(z, p)| Ok((Species::new(z)?, p)))
                        .collect::<Result<Vec<_>>>()?;
                    SpeciesDistribution::new(entries)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| self.fail(e.to_string()))?;
            s = s.with_occupancies(dists).map_err(|e| self.fail(e.to_string()))?;
        }
        Ok(s.wrap_to_cell())
    }

    /// Record describing `s` in Cartesian coordinates.
    pub fn from_structure(id: impl Into<String>, s: &CrystalStructure, target: f64) -> Self {
        let m = s.lattice().matrix();
        let mut lattice = [0.0; 9];
        for c in 0..3 {
            for r in 0..3 {
                lattice[3 * c + r] = m[(r, c)];
            }
        }
        DatasetRecord {
            id: id.into(),
            lattice,
            species: s.species().iter().map(|z| z.z() as u32).collect(),
            positions: s.positions().iter().map(|p| [p.x, p.y, p.z]).collect(),
            coords_kind: CoordsKind::Cartesian,
            target,
            occupancies: s
                .occupancies()
                .map(|occ| occ.iter().map(|d| d.iter().map(|(z, p)| (z.z() as u32, p)).collect()).collect()),
        }
    }
}

/// A record and its validated structure.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub record: DatasetRecord,
    pub structure: CrystalStructure,
}

impl Entry {
    pub fn new(record: DatasetRecord) -> Result<Self> {
        let structure = record.to_structure()?;
        Ok(Entry { record, structure })
    }
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k + 1,
            detail: e.to_string(),
        })?;
        out.push(Entry::new(record)?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Entry>> {
    parse_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Train/validation/test fractions plus shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions {parts:?} must be nonnegative and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Index sets of a split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`; validation and test sizes are floored and the
/// remainder goes to training.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_val = (n as f64 * spec.val).floor() as usize;
    let n_test = (n as f64 * spec.test).floor() as usize;
    let test = idx.split_off(n - n_test);
    let val = idx.split_off(n - n_test - n_val);
    Ok(Split { train: idx, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn record(coords: CoordsKind, p: [f64; 3]) -> DatasetRecord {
        DatasetRecord {
            id: "x".into(),
            lattice: [4.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 4.0],
            species: vec![26],
            positions: vec![p],
            coords_kind: coords,
            target: -1.25,
            occupancies: None,
        }
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        assert!(parse_dataset(Cursor::new("")).unwrap().is_empty());
    }

    #[test]
    fn fractional_coordinates_become_cartesian() {
        let e = Entry::new(record(CoordsKind::Fractional, [0.5, 0.5, 0.5])).unwrap();
        assert_eq!(e.structure.positions()[0], Vector3::new(2.0, 2.0, 2.0));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = serde_json::to_string(&record(CoordsKind::Cartesian, [0.0; 3])).unwrap();
        let text = format!("{good}\n\n{{\"id\": 3}}\n");
        match parse_dataset(Cursor::new(text)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_record_reports_id() {
        let mut r = record(CoordsKind::Cartesian, [0.0; 3]);
        r.species = vec![120];
        r.id = "bad-species".into();
        match Entry::new(r) {
            Err(Error::Record { id, .. }) => assert_eq!(id, "bad-species"),
            other => panic!("expected record error, got {other:?}"),
        }
        let mut r = record(CoordsKind::Cartesian, [0.0; 3]);
        r.lattice = [1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert!(matches!(Entry::new(r), Err(Error::Record { .. })));
    }

    #[test]
    fn left_handed_lattice_is_flipped() {
        let mut r = record(CoordsKind::Cartesian, [1.0, 1.0, 1.0]);
        r.lattice = [4.0, 0.0, 0.0, 0.0, 0.0, 4.0, 0.0, 4.0, 0.0];
        let e = Entry::new(r).unwrap();
        assert!(e.structure.lattice().volume() > 0.0);
        let shift = e.structure.positions()[0] - Vector3::new(1.0, 1.0, 1.0);
        let f = e.structure.lattice().to_fractional(&shift);
        assert!(f.iter().all(|x| (x - x.round()).abs() < 1e-12), "{f:?}");
    }

    #[test]
    fn write_then_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut r = record(CoordsKind::Cartesian, [0.1 + 0.2, 1.0 / 3.0, 2.0f64.sqrt()]);
        r.target = std::f64::consts::PI * 1e-7;
        r.occupancies = Some(vec![vec![(26, 0.3), (28, 0.7)]]);
        write_dataset(&path, &[r.clone()]).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back[0].record, r);
        assert_eq!(back[0].record.target.to_bits(), r.target.to_bits());
    }

    #[test]
    fn split_examples() {
        let all = split(10, &SplitSpec { train: 1.0, val: 0.0, test: 0.0, seed: 1 }).unwrap();
        assert_eq!(all.train.len(), 10);
        let s = split(10, &SplitSpec { train: 0.8, val: 0.1, test: 0.1, seed: 1 }).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let again = split(10, &SplitSpec { train: 0.8, val: 0.1, test: 0.1, seed: 1 }).unwrap();
        assert_eq!(s, again);
        let mut every: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        every.sort();
        assert_eq!(every, (0..10).collect::<Vec<_>>());
        assert!(split(10, &SplitSpec { train: 0.8, val: 0.1, test: 0.2, seed: 1 }).is_err());
    }
}
