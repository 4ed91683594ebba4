//! Spherical-harmonic signal representation.
//!
//! Converts diffusion-weighted signals into per-voxel vectors of real,
//! even-order SH coefficients and extracts the 3x3x3 neighborhood feature
//! blocks consumed by the network.

mod basis;
mod fit;
mod volume;

pub use basis::{sh_basis_matrix, BasisMatrix, ShBasisConfig};
pub use fit::{fit_sh, normalize_dwi, DwiVolume, GradientScheme, B0_THRESHOLD};
pub use volume::{sample_neighborhood, NeighborhoodFeature, ShVolume};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShError {
    #[error("l_max must be even, got {0}")]
    OddOrder(usize),
    #[error("gradient scheme invalid: {0}")]
    BadScheme(String),
    #[error("direction {index} has norm {norm}, expected unit length")]
    NotUnit { index: usize, norm: f64 },
    #[error("{need} non-b0 directions required for an order-{lmax} fit, got {got}")]
    TooFewDirections { need: usize, got: usize, lmax: usize },
    #[error("rank-deficient normal equations with reg=0 at voxel {voxel:?}")]
    RankDeficient { voxel: [usize; 3] },
    #[error("volume shape mismatch: {0}")]
    BadVolume(String),
}
