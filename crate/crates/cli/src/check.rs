//! Invariance suites run by `dynframe check`.

use std::fmt;
use std::str::FromStr;

use dynframe::crystal::CrystalStructure;
use dynframe::frames::FrameMethod;
use dynframe::model::{ForwardOptions, Model, DEFAULT_RADIUS_MULTIPLIER};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::CliError;

pub const REPORT_HEADER: &str = "suite,max_deviation,tolerance,status,worst_structure";

/// Rigid motions tried per structure.
const TRANSFORMS_PER_STRUCTURE: usize = 3;
const PERMUTATIONS_PER_STRUCTURE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Rotation,
    Translation,
    Permutation,
    Supercell,
    Truncation,
    Frames,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Rotation,
        Suite::Translation,
        Suite::Permutation,
        Suite::Supercell,
        Suite::Truncation,
        Suite::Frames,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Rotation => "rotation",
            Suite::Translation => "translation",
            Suite::Permutation => "permutation",
            Suite::Supercell => "supercell",
            Suite::Truncation => "truncation",
            Suite::Frames => "frames",
        }
    }

    /// Absolute prediction tolerance, except truncation (relative state
    /// change) and frames (largest orthonormality violation).
    pub fn tolerance(self) -> f64 {
        match self {
            Suite::Rotation | Suite::Translation | Suite::Supercell => 1e-8,
            Suite::Permutation => 1e-9,
            Suite::Truncation => 1e-5,
            Suite::Frames => 1e-9,
        }
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown suite `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// Exceeds the tolerance for a frame method that is not expected to be
    /// invariant; reported but not a violation.
    Informational,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Informational => "not-invariant",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub suite: Suite,
    pub max_deviation: f64,
    pub worst: Option<String>,
    pub status: Status,
}

impl SuiteResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.suite.name(),
            self.max_deviation,
            self.suite.tolerance(),
            self.status,
            self.worst.as_deref().unwrap_or("")
        )
    }
}

pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let mut c = || -> f64 { StandardNormal.sample(rng) };
    UnitQuaternion::from_quaternion(Quaternion::new(c(), c(), c(), c()))
        .to_rotation_matrix()
        .into_inner()
}

fn random_shift(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
}

/// Moves every atom by a random lattice translation.
pub fn rewrapped(s: &CrystalStructure, rng: &mut impl Rng) -> dynframe::Result<CrystalStructure> {
    let mut out = s.clone();
    for i in 0..s.len() {
        let n = Vector3::from_fn(|_, _| rng.random_range(-2i32..=2) as f64);
        out = out.displaced(i, &s.lattice().to_cartesian(&n))?;
    }
    Ok(out)
}

struct Tracker {
    max: f64,
    worst: Option<String>,
}

impl Tracker {
    fn new() -> Self {
        Tracker { max: 0.0, worst: None }
    }

    fn see(&mut self, deviation: f64, id: &str) {
        // NaN counts as the worst possible deviation
        let d = if deviation.is_nan() { f64::INFINITY } else { deviation };
        if self.worst.is_none() || d > self.max {
            self.max = d;
            self.worst = Some(id.to_string());
        }
    }
}

fn relative_change(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

/// Runs the requested suites on `structures` (id, structure).
pub fn run_suites(
    model: &Model,
    structures: &[(String, CrystalStructure)],
    suites: &[Suite],
    seed: u64,
    corrupt_frames: bool,
) -> Result<Vec<SuiteResult>, CliError> {
    let opts = ForwardOptions {
        corrupt_frames,
        ..ForwardOptions::default()
    };
    let predict = |s: &CrystalStructure| -> Result<f64, CliError> { Ok(model.predict(s, &opts)?) };
    let mut out = Vec::new();
    for &suite in suites {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ suite as u64);
        let mut t = Tracker::new();
        for (id, s) in structures {
            match suite {
                Suite::Rotation | Suite::Translation => {
                    let base = predict(s)?;
                    for _ in 0..TRANSFORMS_PER_STRUCTURE {
                        let rot = if suite == Suite::Rotation {
                            random_rotation(&mut rng)
                        } else {
                            Matrix3::identity()
                        };
                        let moved = s.rigid_transform(&rot, &random_shift(&mut rng, 10.0))?;
                        t.see((predict(&moved)? - base).abs(), id);
                    }
                }
                Suite::Permutation => {
                    let base = predict(s)?;
                    for _ in 0..PERMUTATIONS_PER_STRUCTURE {
                        let mut order: Vec<usize> = (0..s.len()).collect();
                        order.shuffle(&mut rng);
                        t.see((predict(&s.permuted(&order)?)? - base).abs(), id);
                    }
                }
                Suite::Supercell => {
                    let base = predict(s)?;
                    for factors in [[2, 1, 1], [1, 2, 2]] {
                        t.see((predict(&s.make_supercell(factors)?)? - base).abs(), id);
                    }
                    t.see((predict(&rewrapped(s, &mut rng)?)? - base).abs(), id);
                }
                Suite::Truncation => {
                    let states = |mult: f64| -> Result<Vec<f64>, CliError> {
                        let o = ForwardOptions {
                            radius_multiplier: mult,
                            ..opts.clone()
                        };
                        let f = model.forward(s, &o)?;
                        let last = *f.states.last().expect("at least one state");
                        Ok(f.graph.value(last).data().to_vec())
                    };
                    let near = states(DEFAULT_RADIUS_MULTIPLIER)?;
                    let far = states(2.0 * DEFAULT_RADIUS_MULTIPLIER)?;
                    t.see(relative_change(&near, &far), id);
                }
                Suite::Frames => {
                    for rec in model.dump_trace(s, &opts)? {
                        if let Some(f) = rec.frame {
                            t.see(f.invariant_violation(), id);
                        }
                    }
                }
            }
        }
        let informational = suite == Suite::Supercell
            && matches!(model.config.frame_method, FrameMethod::Pca | FrameMethod::Lattice)
            && model.config.uses_angles();
        let status = if t.max <= suite.tolerance() {
            Status::Pass
        } else if informational {
            Status::Informational
        } else {
            Status::Fail
        };
        out.push(SuiteResult {
            suite,
            max_deviation: t.max,
            worst: t.worst,
            status,
        });
    }
    Ok(out)
}
