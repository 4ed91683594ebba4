use std::path::Path;

use serde::{Deserialize, Serialize};

use ddtrack_core::model::{ModelConfig, TrainConfig};
use ddtrack_core::phantom::{BundleSpec, TensorModelParams};

use crate::CliError;

/// Full run configuration. Every field has a default; unknown keys are
/// rejected. Precedence: command-line flags > config file > defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for every random stream. Falls back to the DDTRACK_SEED
    /// environment variable, then 0.
    pub seed: Option<u64>,
    pub phantom: PhantomSection,
    pub sh: ShSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub track: TrackSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// Rician noise level; null disables noise.
    pub snr: Option<f64>,
    pub streamlines_per_bundle: usize,
    pub gt_step: f64,
    pub tensor: TensorModelParams,
    /// Custom bundle geometry; null selects the built-in three-bundle layout.
    pub bundles: Option<Vec<BundleSpec>>,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            dims: [40, 40, 40],
            voxel_size: 2.0,
            snr: Some(20.0),
            streamlines_per_bundle: 100,
            gt_step: 1.0,
            tensor: TensorModelParams::default(),
            bundles: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShSection {
    pub lmax: usize,
    pub reg: f64,
}

impl Default for ShSection {
    fn default() -> Self {
        ShSection { lmax: 6, reg: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackSection {
    pub seeds_per_voxel: usize,
    pub step: f64,
    pub angle: f64,
    pub max_steps: usize,
    pub bidirectional: bool,
    pub num_steps: usize,
    pub deterministic: bool,
    pub min_points: usize,
    pub workers: usize,
}

impl Default for TrackSection {
    fn default() -> Self {
        TrackSection {
            seeds_per_voxel: 5,
            step: 1.0,
            angle: 45.0,
            max_steps: 500,
            bidirectional: true,
            num_steps: 4,
            deterministic: true,
            min_points: 3,
            workers: 2,
        }
    }
}

impl TrackSection {
    pub fn tracker_config(&self) -> ddtrack_core::tracker::TrackerConfig {
        ddtrack_core::tracker::TrackerConfig {
            step_alpha: self.step,
            seeds_per_voxel: self.seeds_per_voxel,
            angle_threshold_deg: self.angle,
            max_steps: self.max_steps,
            bidirectional: self.bidirectional,
            sampler: ddtrack_core::diffusion::SamplerConfig {
                num_steps: self.num_steps,
                deterministic: self.deterministic,
            },
            min_points: self.min_points,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::usage(format!("config {} invalid: {e}", path.display())))
    }

    /// Effective master seed: config value, then DDTRACK_SEED, then 0.
    pub fn effective_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed)
            .or_else(|| std::env::var("DDTRACK_SEED").ok().and_then(|s| s.parse().ok()))
            .unwrap_or(0)
    }
}
