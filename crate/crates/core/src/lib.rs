//! End-to-end diffusion-model tractography at phantom scale.
//!
//! The pipeline: simulate a multi-bundle diffusion MRI phantom, fit
//! spherical-harmonic coefficient volumes, train a conditional denoising
//! model that predicts streamline propagation orientations, track whole
//! volumes, and score the result with streamline- and volume-level metrics.
//!
//! The numeric core ([`autodiff`], [`sh`], [`diffusion`]) is generic over the
//! scalar type through [`scalar::Scalar`]; the training and tracking pipeline
//! is pinned to `f64` via the [`Real`] alias below.

pub mod autodiff;
pub mod diffusion;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod scalar;
pub mod sh;
pub mod streamline;
pub mod tracker;

/// Scalar used by the training/tracking pipeline.
pub type Real = f64;

pub type Tensor = autodiff::Tensor<Real>;
pub type Graph = autodiff::Graph<Real>;
pub type ShVolume = sh::ShVolume<Real>;
pub type NeighborhoodFeature = sh::NeighborhoodFeature<Real>;
pub type DwiVolume = sh::DwiVolume<Real>;

pub use grid::Grid;
pub use rng::Prng;
pub use streamline::{Streamline, Tractogram};
