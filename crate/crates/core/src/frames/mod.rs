//! Local and global coordinate frames used to project edge directions.

mod dynamic;
mod eigen;
mod global;

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::images::PeriodicImage;

pub use dynamic::{max_frame, static_local_frame, weighted_pca_frame, NOISE_AMPLITUDE, PCA_RETRIES};
pub use eigen::{eig3_sym, SymmetricEigen3, DEGENERACY_TOLERANCE};
pub use global::{frame_average, lattice_frame, pca_frames, LATTICE_SEARCH_BOUND};

/// Which frame construction the encoder uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMethod {
    None,
    Pca,
    Lattice,
    StaticLocal,
    WeightedPca,
    Max,
}

impl FrameMethod {
    pub const ALL: [FrameMethod; 6] = [
        FrameMethod::None,
        FrameMethod::Pca,
        FrameMethod::Lattice,
        FrameMethod::StaticLocal,
        FrameMethod::WeightedPca,
        FrameMethod::Max,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FrameMethod::None => "none",
            FrameMethod::Pca => "pca",
            FrameMethod::Lattice => "lattice",
            FrameMethod::StaticLocal => "static_local",
            FrameMethod::WeightedPca => "weighted_pca",
            FrameMethod::Max => "max",
        }
    }

    /// Built per atom, head and layer from attention weights.
    pub fn is_dynamic(self) -> bool {
        matches!(self, FrameMethod::WeightedPca | FrameMethod::Max)
    }
}

impl fmt::Display for FrameMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FrameMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FrameMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown frame method `{s}`")))
    }
}

/// Three axis rows plus provenance flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub axes: [Vector3<f64>; 3],
    pub kind: FrameMethod,
    /// Eigenvalue degeneracy was detected while building the frame.
    pub degenerate: bool,
    /// The requested construction was replaced by a fallback.
    pub fallback: bool,
}

impl Frame {
    pub fn identity(kind: FrameMethod) -> Self {
        Frame {
            axes: [Vector3::x(), Vector3::y(), Vector3::z()],
            kind,
            degenerate: false,
            fallback: false,
        }
    }

    /// Row matrix `[e1; e2; e3]`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[self.axes[0].transpose(), self.axes[1].transpose(), self.axes[2].transpose()])
    }

    pub fn determinant(&self) -> f64 {
        self.axes[0].dot(&self.axes[1].cross(&self.axes[2]))
    }

    /// Direction cosines `e_k · dir`; the zero vector for the self edge.
    pub fn project(&self, dir: Option<&Vector3<f64>>) -> [f64; 3] {
        match dir {
            Some(d) => [self.axes[0].dot(d), self.axes[1].dot(d), self.axes[2].dot(d)],
            None => [0.0; 3],
        }
    }

    /// Largest violation of unit norm, orthogonality (when required) and
    /// positive orientation.
    pub fn invariant_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in &self.axes {
            worst = worst.max((a.norm() - 1.0).abs());
        }
        let det = self.determinant();
        if self.kind == FrameMethod::Lattice {
            worst = worst.max((1e-6 - det).max(0.0));
        } else {
            for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                worst = worst.max(self.axes[i].dot(&self.axes[j]).abs());
            }
            worst = worst.max((det - 1.0).abs());
        }
        worst
    }
}

/// `e_k · dir` for a frame and an optional direction.
pub fn project_angles(frame: &Frame, dir: Option<&Vector3<f64>>) -> [f64; 3] {
    frame.project(dir)
}

/// Noise and tie-break regime for frame construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    /// Weight noise and random sign choices.
    Train,
    /// No noise; deterministic tie-breaks.
    Eval,
}

/// Random source for frame construction. In eval mode it never draws.
#[derive(Clone, Debug)]
pub struct FrameRng {
    mode: FrameMode,
    rng: ChaCha8Rng,
}

impl FrameRng {
    pub fn eval() -> Self {
        FrameRng {
            mode: FrameMode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        FrameRng {
            mode: FrameMode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for one (layer, head, atom) at one training step.
    pub fn stream(mode: FrameMode, seed: u64, step: u64, layer: usize, head: usize, atom: usize) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&step.to_le_bytes());
        key[16..24].copy_from_slice(&(layer as u64).to_le_bytes());
        key[24..28].copy_from_slice(&(head as u32).to_le_bytes());
        key[28..32].copy_from_slice(&(atom as u32).to_le_bytes());
        FrameRng {
            mode,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn mode(&self) -> FrameMode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == FrameMode::Train
    }

    /// `1 + u` with `u` uniform in `[-NOISE_AMPLITUDE, NOISE_AMPLITUDE]`.
    pub(crate) fn noise_factor(&mut self) -> f64 {
        1.0 + self.rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE)
    }

    pub(crate) fn sign(&mut self) -> f64 {
        if self.rng.random_bool(0.5) {
            1.0
        } else {
            -1.0
        }
    }

    pub(crate) fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// One weighted direction around a center atom.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedDirection {
    pub dir: Vector3<f64>,
    /// Lattice-coordinate key used to break exact ties.
    pub key: Vector3<f64>,
    pub weight: f64,
}

/// Weighted neighbor directions; zero-length displacements are dropped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightedNeighborhood(pub Vec<WeightedDirection>);

impl WeightedNeighborhood {
    /// Pairs images with weights, skipping the self image.
    pub fn from_images(images: &[PeriodicImage], weights: &[f64]) -> Result<Self> {
        if images.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} images but {} weights",
                images.len(),
                weights.len()
            )));
        }
        let mut out = Vec::with_capacity(images.len());
        for (im, &w) in images.iter().zip(weights) {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Numeric(format!("invalid frame weight {w}")));
            }
            if let Some(dir) = im.dir {
                out.push(WeightedDirection { dir, key: im.frac, weight: w });
            }
        }
        Ok(WeightedNeighborhood(out))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has_positive_weight(&self) -> bool {
        self.0.iter().any(|e| e.weight > 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let f = Frame::identity(FrameMethod::Max);
        assert_eq!(f.project(Some(&Vector3::z())), [0.0, 0.0, 1.0]);
        assert_eq!(f.project(None), [0.0; 3]);
        let e1 = Vector3::new(1.0, 1.0, 0.0).normalize();
        let e2 = Vector3::new(-1.0, 1.0, 0.0).normalize();
        let g = Frame {
            axes: [e1, e2, e1.cross(&e2)],
            ..f
        };
        let p = g.project(Some(&e1));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1].abs() < 1e-15 && p[2].abs() < 1e-15);
    }

    #[test]
    fn frame_method_names_round_trip() {
        for m in FrameMethod::ALL {
            assert_eq!(m.as_str().parse::<FrameMethod>().unwrap(), m);
        }
        assert!("spherical".parse::<FrameMethod>().is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = FrameRng::stream(FrameMode::Train, 7, 3, 1, 2, 5);
        let mut b = FrameRng::stream(FrameMode::Train, 7, 3, 1, 2, 5);
        let mut c = FrameRng::stream(FrameMode::Train, 7, 3, 1, 2, 6);
        let xa: Vec<f64> = (0..4).map(|_| a.noise_factor()).collect();
        let xb: Vec<f64> = (0..4).map(|_| b.noise_factor()).collect();
        let xc: Vec<f64> = (0..4).map(|_| c.noise_factor()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert!(xa.iter().all(|v| (v - 1.0).abs() <= NOISE_AMPLITUDE));
    }
}
