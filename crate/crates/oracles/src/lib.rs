//! Slow, literal reference implementations used to cross-check the encoder.
//!
//! Nothing here calls into the production algorithms; only the plain data
//! types (structures, parameters, configuration) are shared.

mod attention;
pub mod fixtures;
mod eigen;
mod frames;
mod images;

pub use attention::oracle_attention;
pub use eigen::{jacobi_eigen, JacobiEigen};
pub use frames::{admissible_frames, OracleFrameKind};
pub use images::{brute_force_images, OracleImage};

/// Coverage settings. Both are deliberately larger than what the encoder uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    /// Minimum shift range per lattice direction.
    pub bounds: [i32; 3],
    /// Factor applied to the encoder's radius multiplier.
    pub wide_multiplier: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            bounds: [6, 6, 6],
            wide_multiplier: 2.0,
        }
    }
}
