//! Deterministic streamline propagation over a trained orientation model:
//! seeding, the fixed-step recurrence, stopping rules, and whole-volume
//! tracking with schedule-independent parallelism.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{DiffusionError, SamplerConfig};
use crate::grid::Grid;
use crate::model::{OrientationPredictor, PredictError, TemporalState};
use crate::rng::Prng;
use crate::sh::NeighborhoodFeature;
use crate::streamline::{add3, dot3, scale3, Streamline, Tractogram};
use crate::{Real, ShVolume};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("white-matter mask is empty")]
    EmptyMask,
    #[error("mask has {got} voxels, grid has {want}")]
    MaskGridMismatch { got: usize, want: usize },
    #[error("orientation model failed: {0}")]
    Model(String),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Step size in voxels.
    pub step_alpha: f64,
    pub seeds_per_voxel: usize,
    pub angle_threshold_deg: f64,
    /// Step budget per directional half.
    pub max_steps: usize,
    pub bidirectional: bool,
    pub sampler: SamplerConfig,
    /// Streamlines shorter than this many points are discarded.
    pub min_points: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            step_alpha: 1.0,
            seeds_per_voxel: 5,
            angle_threshold_deg: 45.0,
            max_steps: 500,
            bidirectional: true,
            sampler: SamplerConfig::default(),
            min_points: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaskExit,
    Angle,
    MaxSteps,
    Degenerate,
}

/// Orientation source driving the tracker. Implemented by the trained
/// predictor and by analytic oracles in tests.
pub trait OrientationModel: Sync {
    type State: Clone + Send;
    fn initial_state(&self) -> Self::State;
    /// Raw (sign-ambiguous) unit orientation at a tracking point.
    fn predict(
        &self,
        feature: &NeighborhoodFeature<Real>,
        position: [Real; 3],
        state: &mut Self::State,
        rng: &mut Prng,
    ) -> Result<[Real; 3], PredictError>;
}

impl OrientationModel for OrientationPredictor<'_> {
    type State = TemporalState;

    fn initial_state(&self) -> TemporalState {
        OrientationPredictor::initial_state(self)
    }

    fn predict(
        &self,
        feature: &NeighborhoodFeature<Real>,
        _position: [Real; 3],
        state: &mut TemporalState,
        rng: &mut Prng,
    ) -> Result<[Real; 3], PredictError> {
        OrientationPredictor::predict(self, feature, state, rng)
    }
}

/// Propagation state of one directional half.
#[derive(Clone, Debug)]
pub struct TrackState<S> {
    pub points: Vec<[Real; 3]>,
    pub prev_dir: Option<[Real; 3]>,
    /// Turn angle (degrees) of the most recently appended step.
    pub last_turn_deg: Option<f64>,
    pub temporal: S,
    pub stop: Option<StopReason>,
}

impl<S> TrackState<S> {
    pub fn at_seed(seed: [Real; 3], temporal: S) -> Self {
        TrackState { points: vec![seed], prev_dir: None, last_turn_deg: None, temporal, stop: None }
    }
}

/// Uniformly jittered seed positions inside every mask voxel, in voxel
/// index order; deterministic for a fixed seed.
pub fn seed_points(
    wm_mask: &[bool],
    grid: &Grid,
    seeds_per_voxel: usize,
    rng: &Prng,
) -> Result<Vec<[Real; 3]>, TrackError> {
    if wm_mask.len() != grid.num_voxels() {
        return Err(TrackError::MaskGridMismatch { got: wm_mask.len(), want: grid.num_voxels() });
    }
    if !wm_mask.iter().any(|&m| m) {
        return Err(TrackError::EmptyMask);
    }
    let mut seeds = Vec::new();
    for v in 0..grid.num_voxels() {
        if !wm_mask[v] {
            continue;
        }
        let base = grid.voxel_at(v);
        let mut r = rng.split(v as u64);
        for _ in 0..seeds_per_voxel {
            seeds.push([
                base[0] as f64 + r.uniform(),
                base[1] as f64 + r.uniform(),
                base[2] as f64 + r.uniform(),
            ]);
        }
    }
    Ok(seeds)
}

/// Stopping rules on the current state: mask exit on the newest point's
/// containing voxel, the curvature threshold on the last appended turn, and
/// the step budget.
pub fn check_stop<S>(
    state: &TrackState<S>,
    wm_mask: &[bool],
    grid: &Grid,
    config: &TrackerConfig,
) -> Option<StopReason> {
    let newest = *state.points.last().expect("state has at least the seed");
    match grid.voxel_of(newest) {
        None => return Some(StopReason::MaskExit),
        Some(v) if !wm_mask[grid.index(v)] => return Some(StopReason::MaskExit),
        _ => {}
    }
    if let Some(turn) = state.last_turn_deg {
        if turn > config.angle_threshold_deg {
            return Some(StopReason::Angle);
        }
    }
    if state.points.len() > config.max_steps {
        return Some(StopReason::MaxSteps);
    }
    None
}

/// Advances one propagation step: sample the neighborhood feature, query the
/// model, sign-align to the previous direction, apply the curvature rule
/// (a violating step is never appended), then append `p + alpha * dir` and
/// evaluate the remaining stopping rules (a mask-exiting point is retained).
pub fn step<M: OrientationModel>(
    state: &mut TrackState<M::State>,
    model: &M,
    sh: &ShVolume,
    wm_mask: &[bool],
    config: &TrackerConfig,
    rng: &mut Prng,
) -> Result<(), TrackError> {
    debug_assert!(state.stop.is_none(), "stepping a stopped state");
    let p = *state.points.last().expect("seeded state");
    let feature = crate::sh::sample_neighborhood(sh, p);
    let raw = match model.predict(&feature, p, &mut state.temporal, rng) {
        Ok(d) => d,
        Err(PredictError::Diffusion(DiffusionError::DegenerateOrientation)) => {
            state.stop = Some(StopReason::Degenerate);
            return Ok(());
        }
        Err(e) => return Err(TrackError::Model(e.to_string())),
    };
    let dir = match state.prev_dir {
        Some(prev) if dot3(raw, prev) < 0.0 => [-raw[0], -raw[1], -raw[2]],
        _ => raw,
    };
    if let Some(prev) = state.prev_dir {
        let cos = dot3(dir, prev).clamp(-1.0, 1.0);
        let turn = cos.acos().to_degrees();
        if turn > config.angle_threshold_deg {
            state.stop = Some(StopReason::Angle);
            return Ok(());
        }
        state.last_turn_deg = Some(turn);
    }
    state.prev_dir = Some(dir);
    state.points.push(add3(p, scale3(dir, config.step_alpha)));
    state.stop = check_stop(state, wm_mask, &sh.grid, config);
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrackStats {
    pub n_seeds: usize,
    pub emitted: usize,
    pub discarded_short: usize,
    pub stops_mask_exit: usize,
    pub stops_angle: usize,
    pub stops_max_steps: usize,
    pub stops_degenerate: usize,
}

impl TrackStats {
    fn count(&mut self, reason: StopReason) {
        match reason {
            StopReason::MaskExit => self.stops_mask_exit += 1,
            StopReason::Angle => self.stops_angle += 1,
            StopReason::MaxSteps => self.stops_max_steps += 1,
            StopReason::Degenerate => self.stops_degenerate += 1,
        }
    }
}

fn run_half<M: OrientationModel>(
    seed: [Real; 3],
    initial_prev: Option<[Real; 3]>,
    model: &M,
    sh: &ShVolume,
    wm_mask: &[bool],
    config: &TrackerConfig,
    rng: &mut Prng,
) -> Result<(TrackState<M::State>, Option<[Real; 3]>), TrackError> {
    let mut state = TrackState::at_seed(seed, model.initial_state());
    state.prev_dir = initial_prev;
    let mut first_dir = None;
    while state.stop.is_none() {
        let before = state.prev_dir;
        step(&mut state, model, sh, wm_mask, config, rng)?;
        if first_dir.is_none() && before.is_none() {
            first_dir = state.prev_dir;
        }
    }
    Ok((state, first_dir))
}

/// Tracks every seed independently (parallel over seeds, results in seed
/// order). With bidirectional tracking, a second pass restarts at the seed
/// with a fresh temporal state and the first predicted direction negated;
/// the first half is reversed and the halves joined at the seed.
pub fn track<M: OrientationModel>(
    seeds: &[[Real; 3]],
    model: &M,
    sh: &ShVolume,
    wm_mask: &[bool],
    config: &TrackerConfig,
    master_seed: u64,
) -> Result<(Tractogram, TrackStats), TrackError> {
    if wm_mask.len() != sh.grid.num_voxels() {
        return Err(TrackError::MaskGridMismatch { got: wm_mask.len(), want: sh.grid.num_voxels() });
    }
    let base = Prng::new(master_seed).split(0x7acc);

    let per_seed: Vec<Result<(Option<Streamline>, Vec<StopReason>), TrackError>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let seed_rng = base.split(i as u64);
            let mut reasons = Vec::with_capacity(2);
            let mut rng1 = seed_rng.split(0);
            let (pass1, first_dir) =
                run_half(seed, None, model, sh, wm_mask, config, &mut rng1)?;
            reasons.push(pass1.stop.expect("half ran to a stop"));

            let mut points = pass1.points;
            if config.bidirectional {
                if let Some(d1) = first_dir {
                    let mut rng2 = seed_rng.split(1);
                    let (pass2, _) = run_half(
                        seed,
                        Some([-d1[0], -d1[1], -d1[2]]),
                        model,
                        sh,
                        wm_mask,
                        config,
                        &mut rng2,
                    )?;
                    reasons.push(pass2.stop.expect("half ran to a stop"));
                    // Reverse the first half and append the second, joined
                    // at the shared seed point.
                    points.reverse();
                    points.extend_from_slice(&pass2.points[1..]);
                }
            }
            let sl = (points.len() >= config.min_points).then(|| Streamline::new(points));
            Ok((sl, reasons))
        })
        .collect();

    let mut stats = TrackStats { n_seeds: seeds.len(), ..TrackStats::default() };
    let mut streamlines = Vec::new();
    for r in per_seed {
        let (sl, reasons) = r?;
        for reason in reasons {
            stats.count(reason);
        }
        match sl {
            Some(s) => {
                streamlines.push(s);
                stats.emitted += 1;
            }
            None => stats.discarded_short += 1,
        }
    }
    Ok((Tractogram::new(streamlines), stats))
}
