//! Synthetic ground truth: bundle geometries, orientation fields, masks,
//! endpoint ROIs, simulated diffusion-weighted signal with Rician noise, and
//! reference tractograms.

mod bundles;
mod gradients;
mod gt;
mod simulate;

pub use bundles::{
    arc_centerline, build_phantom, default_bundle_specs, default_grid, BundleSpec, Compartment,
    PhantomDataset, Polyline, DEFAULT_BUNDLE_RADIUS, ROI_RADIUS,
};
pub use gradients::{default_scheme, DEFAULT_BVAL, ELECTROSTATIC_32};
pub use gt::{generate_gt_tractogram, GtStats, GT_RADIAL_MARGIN};
pub use simulate::{simulate_dwi, TensorModelParams};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("bundle '{name}' extends outside the volume")]
    BundleOutsideVolume { name: String },
    #[error("bundle spec '{name}' invalid: {reason}")]
    BadSpec { name: String, reason: String },
    #[error("bundle '{name}': head and tail ROIs overlap; centerline too short")]
    RoisOverlap { name: String },
    #[error("bundle '{name}': empty {which} ROI")]
    EmptyRoi { name: String, which: &'static str },
    #[error("tensor model requires lambda_parallel > lambda_perp > 0, got {parallel} / {perp}")]
    BadTensorParams { parallel: f64, perp: f64 },
    #[error("ground-truth tracking produced only {accepted}/{requested} streamlines for bundle '{name}'")]
    TooFewStreamlines { name: String, accepted: usize, requested: usize },
}
