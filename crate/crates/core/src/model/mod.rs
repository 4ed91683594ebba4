//! The learnable orientation predictor: dual-branch 3D-conv spatial encoder,
//! two stacked GRUs for trajectory context, sinusoidal step embedding, and a
//! FiLM-conditioned 1D-conv encoder-decoder predicting the attenuation
//! vector, plus the training loop.

mod network;
mod params;
mod train;

pub use network::{
    denoise, embed_step_base, global_condition, gru_cell, reference_forward, spatial_encode,
    temporal_encode, temporal_state_leaves, OrientationPredictor, PredictError, TemporalState,
};
pub use params::{BoundParams, ModelConfig, ModelParameters, ParamStore};
pub use train::{
    finalize_best, prepare_dataset, train, train_loop, AdamW, EpochRecord, TrainConfig,
    TrainError, TrainOutcome, TrainSequence, TrainerState, TrainingSet,
};

use thiserror::Error;

use crate::autodiff::AdError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] AdError),
    #[error("feature has {got} values, model expects {want} (27 x {m} coefficients)")]
    FeatureSize { got: usize, want: usize, m: usize },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("parameter '{name}' has shape {got:?}, expected {want:?}")]
    ParamShape { name: String, got: Vec<usize>, want: Vec<usize> },
}
