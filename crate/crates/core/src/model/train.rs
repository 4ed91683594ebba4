use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::{
    denoise, global_condition, spatial_encode, temporal_encode, temporal_state_leaves,
};
use super::params::{BoundParams, ModelParameters, ParamStore};
use super::ModelError;
use crate::autodiff::NodeId;
use crate::diffusion::{forward_sample, loss_weights, DiffusionError};
use crate::rng::Prng;
use crate::sh::sample_neighborhood;
use crate::streamline::{normalize3, sub3, Tractogram};
use crate::{Graph, Real, ShVolume};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, streamline {sequence}, step {step} (k={k})")]
    NonFinite { epoch: usize, sequence: usize, step: usize, k: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// One teacher-forcing sequence: the neighborhood feature (channel-major)
/// at each point and the unit target orientation toward the next point.
#[derive(Clone, Debug)]
pub struct TrainSequence {
    pub features: Vec<Vec<Real>>,
    pub targets: Vec<[Real; 3]>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub sequences: Vec<TrainSequence>,
}

/// Extracts teacher-forcing sequences from ground-truth streamlines over an
/// SH volume. Each streamline contributes its full sequence plus
/// `suffix_crops` random suffixes, so the zero initial state is also seen at
/// mid-bundle positions (where tracking seeds start). A nonzero
/// `feature_jitter` perturbs every feature-sampling position inside a cube
/// of that half-width while keeping the target orientation, covering the
/// off-axis positions that jittered tracking seeds visit.
pub fn prepare_dataset(
    sh: &ShVolume,
    tractogram: &Tractogram,
    suffix_crops: usize,
    feature_jitter: f64,
    seed: u64,
) -> TrainingSet {
    let mut rng = Prng::new(seed).split(0x0da7a);
    let mut sequences = Vec::new();
    for sl in &tractogram.streamlines {
        if sl.len() < 2 {
            continue;
        }
        let mut starts = vec![0usize];
        for _ in 0..suffix_crops {
            if sl.len() >= 6 {
                starts.push(1 + rng.uniform_usize(sl.len() - 4));
            }
        }
        for start in starts {
            let pts = &sl.points[start..];
            let steps = pts.len() - 1;
            let mut features = Vec::with_capacity(steps);
            let mut targets = Vec::with_capacity(steps);
            for t in 0..steps {
                let Some(dir) = normalize3(sub3(pts[t + 1], pts[t])) else { continue };
                let mut p = pts[t];
                if feature_jitter > 0.0 {
                    for c in p.iter_mut() {
                        *c += rng.uniform_in(-feature_jitter, feature_jitter);
                    }
                }
                features.push(sample_neighborhood(sh, p).to_channel_major());
                targets.push(dir);
            }
            if !targets.is_empty() {
                sequences.push(TrainSequence { features, targets });
            }
        }
    }
    TrainingSet { sequences }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Whole streamlines per optimizer update.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Multiplied into the learning rate after `lr_patience` epochs without
    /// validation improvement, floored at `lr_floor`.
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub lr_floor: f64,
    /// Epochs without validation improvement before stopping with a restore
    /// of the best checkpoint.
    pub early_stop_patience: usize,
    /// Training-time diffusion step is drawn uniformly from [k_min, k_max];
    /// the margin keeps both loss weights bounded.
    pub k_min: f64,
    pub k_max: f64,
    pub val_fraction: f64,
    /// Random suffix crops per streamline during dataset preparation.
    pub suffix_crops: usize,
    /// Half-width (voxels) of the cube jitter applied to feature-sampling
    /// positions during dataset preparation; 0 disables it.
    pub feature_jitter: f64,
    /// Fixed number of parallel gradient chunks per batch; results are
    /// reduced in chunk order, so the value (not the worker count)
    /// determines the floating-point sum order.
    pub grad_chunks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.01,
            lr_decay_factor: 0.1,
            lr_patience: 50,
            lr_floor: 1e-7,
            early_stop_patience: 120,
            k_min: 0.02,
            k_max: 0.98,
            val_fraction: 0.2,
            suffix_crops: 1,
            feature_jitter: 0.0,
            grad_chunks: 4,
            seed: 0,
        }
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m, v }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<Real>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in 0..store.len() {
            let m = &mut self.m[p];
            let v = &mut self.v[p];
            let g = &grads[p];
            let (_, tensor) = store.at_mut(p);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Mutable trainer bookkeeping, checkpointable for exact resume.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub epoch_next: usize,
    pub opt: AdamW,
    pub best_val: f64,
    pub best_params: ParamStore,
    pub epochs_since_improve_lr: usize,
    pub epochs_since_improve_stop: usize,
    pub log: Vec<EpochRecord>,
}

impl TrainerState {
    pub fn fresh(params: &ModelParameters, config: &TrainConfig) -> Self {
        TrainerState {
            epoch_next: 0,
            opt: AdamW::new(&params.store, config.lr, config.weight_decay),
            best_val: f64::INFINITY,
            best_params: params.store.clone(),
            epochs_since_improve_lr: 0,
            epochs_since_improve_stop: 0,
            log: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub best_val: f64,
}

// Stream tags for the independent rng substreams.
const STREAM_SPLIT: u64 = 1;
const STREAM_EPOCH: u64 = 2;
const STREAM_DRAWS: u64 = 3;
const STREAM_VAL: u64 = 4;

/// Per-(sequence, step) diffusion draws for one epoch.
fn step_draws(base: &Prng, seq: usize, n: usize, k_min: f64, k_max: f64) -> Vec<(Real, [Real; 3])> {
    let mut rng = base.split(seq as u64);
    (0..n).map(|_| (rng.uniform_in(k_min, k_max), rng.normal_vec3())).collect()
}

/// Builds the teacher-forced loss for one sequence; returns the summed loss
/// node and per-step (k, loss value) for diagnostics.
fn sequence_loss(
    g: &mut Graph,
    params: &ModelParameters,
    bound: &BoundParams,
    seq: &TrainSequence,
    draws: &[(Real, [Real; 3])],
) -> Result<(NodeId, Vec<(f64, f64)>), TrainError> {
    let delta = params.config.smooth_l1_delta;
    let state = super::network::TemporalState::zeros(&params.config);
    let (mut h0, mut h1) = temporal_state_leaves(g, &state);
    let mut total: Option<NodeId> = None;
    let mut diags = Vec::with_capacity(seq.targets.len());

    for (t, (feature, target)) in seq.features.iter().zip(&seq.targets).enumerate() {
        let (z, v) = spatial_encode(g, params, bound, feature)?;
        let (c, (nh0, nh1)) = temporal_encode(g, params, bound, z, (h0, h1))?;
        h0 = nh0;
        h1 = nh1;

        let (k, eps) = draws[t];
        let y0 = *target;
        let h_true = [-y0[0], -y0[1], -y0[2]];
        let yk = forward_sample(y0, k, eps)?;
        let w = loss_weights(k)?;

        let yk_node = g.constant_vec(yk.to_vec());
        let gcond = global_condition(g, params, bound, c, k)?;
        let h_pred = denoise(g, params, bound, yk_node, gcond, v)?;

        // eps_pred = (yk - (k-1) h_pred) / sqrt(k), with yk constant.
        let sk = k.sqrt();
        let scaled_h = g.affine(h_pred, (1.0 - k) / sk, 0.0);
        let yk_term = g.constant_vec(vec![yk[0] / sk, yk[1] / sk, yk[2] / sk]);
        let eps_pred = g.add(scaled_h, yk_term).map_err(ModelError::from)?;

        let h_true_node = g.constant_vec(h_true.to_vec());
        let eps_node = g.constant_vec(eps.to_vec());
        let l_h = g.smooth_l1(h_pred, h_true_node, delta).map_err(ModelError::from)?;
        let l_h = g.affine(l_h, w.lambda1, 0.0);
        let l_e = g.smooth_l1(eps_pred, eps_node, delta).map_err(ModelError::from)?;
        let l_e = g.affine(l_e, w.lambda2, 0.0);
        let step_loss = g.add(l_h, l_e).map_err(ModelError::from)?;
        diags.push((k, g.value(step_loss)[0]));
        total = Some(match total {
            None => step_loss,
            Some(acc) => g.add(acc, step_loss).map_err(ModelError::from)?,
        });
    }
    Ok((total.expect("non-empty sequence"), diags))
}

struct ChunkResult {
    grads: Vec<Vec<Real>>,
    loss_sum: f64,
    samples: usize,
    non_finite: Option<(usize, usize, f64)>, // (sequence, step, k)
}

fn process_chunk(
    params: &ModelParameters,
    data: &TrainingSet,
    indices: &[usize],
    draw_base: &Prng,
    config: &TrainConfig,
    trainable: bool,
) -> Result<ChunkResult, TrainError> {
    let mut grads: Vec<Vec<Real>> =
        params.store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut loss_sum = 0.0;
    let mut samples = 0usize;
    for &si in indices {
        let seq = &data.sequences[si];
        let draws = step_draws(draw_base, si, seq.targets.len(), config.k_min, config.k_max);
        let mut g = Graph::new();
        let bound = params.store.bind(&mut g, trainable);
        let (loss, diags) = sequence_loss(&mut g, params, &bound, seq, &draws)?;
        for (t, &(k, l)) in diags.iter().enumerate() {
            if !l.is_finite() {
                return Ok(ChunkResult {
                    grads,
                    loss_sum,
                    samples,
                    non_finite: Some((si, t, k)),
                });
            }
        }
        loss_sum += g.value(loss)[0];
        samples += seq.targets.len();
        if trainable {
            let got = g.backward(loss).map_err(ModelError::from)?;
            for (p, id) in bound.ids.iter().enumerate() {
                if let Some(gp) = got.get(*id) {
                    let acc = &mut grads[p];
                    for (a, &x) in acc.iter_mut().zip(gp) {
                        *a += x;
                    }
                }
            }
        }
    }
    Ok(ChunkResult { grads, loss_sum, samples, non_finite: None })
}

/// Splits a batch into `chunks` contiguous runs of near-equal size.
fn chunk_ranges(n: usize, chunks: usize) -> Vec<(usize, usize)> {
    let chunks = chunks.max(1).min(n.max(1));
    let base = n / chunks;
    let rem = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for i in 0..chunks {
        let len = base + usize::from(i < rem);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// Runs epochs `state.epoch_next .. config.epochs`. Resuming from a saved
/// state continues the exact same trajectory as an uninterrupted run.
pub fn train_loop(
    params: &mut ModelParameters,
    data: &TrainingSet,
    config: &TrainConfig,
    state: &mut TrainerState,
) -> Result<TrainOutcome, TrainError> {
    if data.sequences.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let base = Prng::new(config.seed);

    // Deterministic train/validation split.
    let n = data.sequences.len();
    let mut order: Vec<usize> = (0..n).collect();
    base.split(STREAM_SPLIT).shuffle(&mut order);
    let n_val = ((n as f64 * config.val_fraction).round() as usize).min(n.saturating_sub(1));
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let train_idx: Vec<usize> = order[n_val..].to_vec();

    let mut stopped_early = false;
    while state.epoch_next < config.epochs {
        let epoch = state.epoch_next;
        let mut shuffled = train_idx.clone();
        base.split(STREAM_EPOCH).split(epoch as u64).shuffle(&mut shuffled);
        let draw_base = base.split(STREAM_DRAWS).split(epoch as u64);

        let mut epoch_loss = 0.0;
        let mut epoch_samples = 0usize;
        for batch in shuffled.chunks(config.batch_size.max(1)) {
            let ranges = chunk_ranges(batch.len(), config.grad_chunks);
            let results: Vec<Result<ChunkResult, TrainError>> = ranges
                .par_iter()
                .map(|&(a, b)| {
                    process_chunk(params, data, &batch[a..b], &draw_base, config, true)
                })
                .collect();
            let mut batch_grads: Option<Vec<Vec<Real>>> = None;
            let mut batch_loss = 0.0;
            let mut batch_samples = 0usize;
            for r in results {
                let r = r?;
                if let Some((seq, step, k)) = r.non_finite {
                    return Err(TrainError::NonFinite { epoch, sequence: seq, step, k });
                }
                batch_loss += r.loss_sum;
                batch_samples += r.samples;
                batch_grads = Some(match batch_grads {
                    None => r.grads,
                    Some(mut acc) => {
                        for (a, g) in acc.iter_mut().zip(r.grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                        acc
                    }
                });
            }
            let mut grads = batch_grads.expect("non-empty batch");
            let scale = 1.0 / batch_samples as f64;
            for g in grads.iter_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
            state.opt.step(&mut params.store, &grads);
            epoch_loss += batch_loss;
            epoch_samples += batch_samples;
        }
        let train_loss = epoch_loss / epoch_samples.max(1) as f64;

        // Validation with frozen (epoch-independent) draws.
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            let val_base = base.split(STREAM_VAL);
            let r = process_chunk(params, data, &val_idx, &val_base, config, false)?;
            if let Some((seq, step, k)) = r.non_finite {
                return Err(TrainError::NonFinite { epoch, sequence: seq, step, k });
            }
            r.loss_sum / r.samples.max(1) as f64
        };

        state.log.push(EpochRecord { epoch, train_loss, val_loss, lr: state.opt.lr });
        state.epoch_next = epoch + 1;

        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.best_params = params.store.clone();
            state.epochs_since_improve_lr = 0;
            state.epochs_since_improve_stop = 0;
        } else {
            state.epochs_since_improve_lr += 1;
            state.epochs_since_improve_stop += 1;
        }
        if state.epochs_since_improve_lr >= config.lr_patience {
            state.opt.lr = (state.opt.lr * config.lr_decay_factor).max(config.lr_floor);
            state.epochs_since_improve_lr = 0;
        }
        if state.epochs_since_improve_stop >= config.early_stop_patience {
            params.store = state.best_params.clone();
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { log: state.log.clone(), stopped_early, best_val: state.best_val })
}

/// Swaps in the best-validation weights. Applied when a training run is
/// final; mid-run checkpoints keep the live weights so resume continues the
/// exact trajectory.
pub fn finalize_best(params: &mut ModelParameters, state: &TrainerState) {
    if state.best_val.is_finite() {
        params.store = state.best_params.clone();
    }
}

/// Fresh training run over the configured epoch budget, finalized to the
/// best-validation weights.
pub fn train(
    params: &mut ModelParameters,
    data: &TrainingSet,
    config: &TrainConfig,
) -> Result<(TrainOutcome, TrainerState), TrainError> {
    let mut state = TrainerState::fresh(params, config);
    let outcome = train_loop(params, data, config, &mut state)?;
    if !outcome.stopped_early {
        finalize_best(params, &mut state);
    }
    Ok((outcome, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelConfig;

    fn toy_dataset(params: &ModelParameters, n_seq: usize, n_steps: usize) -> TrainingSet {
        let mut rng = Prng::new(77);
        let mut sequences = Vec::new();
        for _ in 0..n_seq {
            let dir = normalize3(rng.normal_vec3()).unwrap();
            let features = (0..n_steps)
                .map(|_| {
                    (0..params.config.feature_len())
                        .map(|_| 0.3 * rng.normal() + dir[0])
                        .collect()
                })
                .collect();
            let targets = vec![dir; n_steps];
            sequences.push(TrainSequence { features, targets });
        }
        TrainingSet { sequences }
    }

    #[test]
    fn adamw_single_step_matches_closed_form() {
        let mut store = ParamStore::new();
        store.insert("p", crate::Tensor::vector(vec![1.0]));
        let mut opt = AdamW::new(&store, 0.1, 0.01);
        opt.step(&mut store, &[vec![0.5]]);
        let m = 0.1 * 0.5;
        let v = 0.001 * 0.25;
        let mhat: f64 = m / (1.0 - 0.9);
        let vhat: f64 = v / (1.0 - 0.999);
        let want = 1.0 - 0.1 * (mhat / (vhat.sqrt() + 1e-8) + 0.01 * 1.0);
        assert!((store.get("p").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn tiny_overfit_reduces_loss_tenfold() {
        let mut params = ModelParameters::init(ModelConfig::tiny(), 1);
        let data = toy_dataset(&params, 6, 4);
        let config = TrainConfig {
            epochs: 150,
            batch_size: 3,
            lr: 3e-3,
            weight_decay: 0.0,
            val_fraction: 0.0,
            grad_chunks: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let (outcome, _) = train(&mut params, &data, &config).unwrap();
        let first = outcome.log.first().unwrap().train_loss;
        let last = outcome.log.last().unwrap().train_loss;
        assert!(
            last <= 0.1 * first,
            "loss did not overfit: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let run = || {
            let mut params = ModelParameters::init(ModelConfig::tiny(), 2);
            let data = toy_dataset(&params, 4, 3);
            let config = TrainConfig {
                epochs: 5,
                batch_size: 2,
                lr: 1e-3,
                grad_chunks: 3,
                seed: 9,
                ..TrainConfig::default()
            };
            let (outcome, _) = train(&mut params, &data, &config).unwrap();
            let weights: Vec<Vec<Real>> =
                params.store.iter().map(|(_, t)| t.data().to_vec()).collect();
            (outcome.log, weights)
        };
        let (log_a, w_a) = run();
        let (log_b, w_b) = run();
        assert_eq!(log_a, log_b);
        for (a, b) in w_a.iter().zip(&w_b) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let config = TrainConfig {
            epochs: 6,
            batch_size: 2,
            lr: 1e-3,
            grad_chunks: 2,
            seed: 3,
            val_fraction: 0.25,
            ..TrainConfig::default()
        };
        let mut p_full = ModelParameters::init(ModelConfig::tiny(), 4);
        let data = toy_dataset(&p_full, 5, 3);
        let (out_full, _) = train(&mut p_full, &data, &config).unwrap();

        let mut p_split = ModelParameters::init(ModelConfig::tiny(), 4);
        let mut state = TrainerState::fresh(&p_split, &config);
        let half = TrainConfig { epochs: 3, ..config };
        train_loop(&mut p_split, &data, &half, &mut state).unwrap();
        // The mid-run state keeps live weights, so resuming continues the
        // exact same trajectory as the uninterrupted run.
        let out_resumed = train_loop(&mut p_split, &data, &config, &mut state).unwrap();
        assert_eq!(out_full.log, out_resumed.log);
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut params = ModelParameters::init(ModelConfig::tiny(), 1);
        let err = train(&mut params, &TrainingSet::default(), &TrainConfig::default());
        assert!(matches!(err, Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn early_stopping_restores_best_checkpoint() {
        let mut params = ModelParameters::init(ModelConfig::tiny(), 6);
        let data = toy_dataset(&params, 4, 3);
        // Aggressive lr destabilizes validation so patience trips quickly.
        let config = TrainConfig {
            epochs: 500,
            batch_size: 2,
            lr: 0.5,
            early_stop_patience: 4,
            lr_patience: 3,
            val_fraction: 0.25,
            seed: 8,
            ..TrainConfig::default()
        };
        let (outcome, state) = train(&mut params, &data, &config).unwrap();
        if outcome.stopped_early {
            assert!(outcome.log.len() < 500);
            // Restored weights are the best-validation snapshot.
            for ((_, a), (_, b)) in params.store.iter().zip(state.best_params.iter()) {
                assert_eq!(a.data(), b.data());
            }
        }
    }
}
