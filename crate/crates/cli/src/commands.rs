use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ddtrack_core::grid::Grid;
use ddtrack_core::io::{
    load_checkpoint, read_tck, read_volume, save_checkpoint, write_tck, write_volume,
    VolumeContainer,
};
use ddtrack_core::metrics::{
    classify_connections, coverage_mask, volume_scores, weighted_dice, ConnectionReport, RoiSet,
    VolumeReport, WeightedDice,
};
use ddtrack_core::model::{
    finalize_best, prepare_dataset, train_loop, ModelParameters, OrientationPredictor,
    TrainerState,
};
use ddtrack_core::phantom::{
    build_phantom, default_bundle_specs, default_scheme, generate_gt_tractogram, simulate_dwi,
};
use ddtrack_core::rng::Prng;
use ddtrack_core::sh::{fit_sh, ShBasisConfig};
use ddtrack_core::tracker::{seed_points, track};

use crate::config::RunConfig;
use crate::manifest::ManifestBuilder;
use crate::CliError;

// Stage tags deriving independent sub-seeds from the master seed.
const STAGE_NOISE: u64 = 1;
const STAGE_GT: u64 = 2;
const STAGE_TRAIN: u64 = 3;
const STAGE_TRACK: u64 = 4;

fn stage_seed(master: u64, tag: u64) -> u64 {
    Prng::new(master).split(tag).next_u64()
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

/// Per-phantom bundle metadata consumed by eval.
#[derive(Serialize, Deserialize)]
pub struct BundleMeta {
    pub names: Vec<String>,
    pub gt_accepted: Vec<usize>,
    pub gt_discarded: Vec<usize>,
}

pub fn cmd_phantom(config: &RunConfig, out_dir: &Path, seed: u64) -> Result<(), CliError> {
    ensure_dir(out_dir)?;
    let section = &config.phantom;
    let grid = Grid::isotropic(section.dims, section.voxel_size);
    let specs = section.bundles.clone().unwrap_or_else(default_bundle_specs);
    let mut phantom = build_phantom(specs, grid).map_err(CliError::usage_from)?;

    let mut gt_rng = Prng::new(stage_seed(seed, STAGE_GT));
    let stats = generate_gt_tractogram(
        &mut phantom,
        section.gt_step,
        section.streamlines_per_bundle,
        &mut gt_rng,
    )
    .map_err(CliError::usage_from)?;

    let scheme = default_scheme();
    let dwi = simulate_dwi(&phantom, &scheme, section.tensor, section.snr, stage_seed(seed, STAGE_NOISE))
        .map_err(CliError::usage_from)?;

    // Per-bundle evaluation masks are the gt coverage (grouped by label).
    let labels = phantom.gt_tractogram.labels.clone().expect("generator labels streamlines");
    let coverage: Vec<Vec<bool>> = (0..phantom.specs.len())
        .map(|b| {
            let indices: Vec<usize> =
                (0..labels.len()).filter(|&i| labels[i] == b).collect();
            coverage_mask(&phantom.gt_tractogram, &indices, &grid)
        })
        .collect();

    write_volume(&out_dir.join("dwi"), &VolumeContainer::from_dwi(&dwi))
        .map_err(CliError::usage_from)?;
    write_volume(&out_dir.join("wm_mask"), &VolumeContainer::from_mask(grid, &phantom.wm_mask)?)
        .map_err(CliError::usage_from)?;
    write_volume(&out_dir.join("bundle_masks"), &VolumeContainer::from_mask_stack(grid, &coverage)?)
        .map_err(CliError::usage_from)?;
    write_volume(
        &out_dir.join("rois_head"),
        &VolumeContainer::from_mask_stack(grid, &phantom.head_rois)?,
    )
    .map_err(CliError::usage_from)?;
    write_volume(
        &out_dir.join("rois_tail"),
        &VolumeContainer::from_mask_stack(grid, &phantom.tail_rois)?,
    )
    .map_err(CliError::usage_from)?;
    write_tck(&out_dir.join("gt.tck"), &phantom.gt_tractogram, grid.voxel_size)
        .map_err(CliError::usage_from)?;

    let meta = BundleMeta {
        names: phantom.specs.iter().map(|s| s.name.clone()).collect(),
        gt_accepted: stats.accepted.clone(),
        gt_discarded: stats.discarded.clone(),
    };
    fs::write(
        out_dir.join("bundles.json"),
        serde_json::to_vec_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| CliError::usage(format!("cannot write bundles.json: {e}")))?;

    let manifest = ManifestBuilder::new("phantom", seed, config);
    manifest.write(out_dir)?;
    println!(
        "phantom: {} bundles, {} wm voxels, {} gt streamlines ({} discarded attempts)",
        phantom.specs.len(),
        phantom.wm_mask.iter().filter(|&&m| m).count(),
        phantom.gt_tractogram.len(),
        stats.discarded.iter().sum::<usize>()
    );
    Ok(())
}

pub fn cmd_fit_sh(
    config: &RunConfig,
    dwi_stem: &Path,
    out_stem: &Path,
    lmax: Option<usize>,
    reg: Option<f64>,
    seed: u64,
) -> Result<(), CliError> {
    let lmax = lmax.unwrap_or(config.sh.lmax);
    let reg = reg.unwrap_or(config.sh.reg);
    let basis = ShBasisConfig::new(lmax).map_err(CliError::usage_from)?;
    if reg < 0.0 {
        return Err(CliError::usage(format!("--reg must be nonnegative, got {reg}")));
    }
    let container = read_volume(dwi_stem).map_err(CliError::usage_from)?;
    let dwi = container.to_dwi().map_err(CliError::usage_from)?;
    let sh = fit_sh(&dwi, basis, reg).map_err(CliError::usage_from)?;
    if let Some(dir) = out_stem.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    write_volume(out_stem, &VolumeContainer::from_sh(&sh)).map_err(CliError::usage_from)?;

    let out_dir = out_stem.parent().unwrap_or(Path::new("."));
    let mut manifest = ManifestBuilder::new("fit-sh", seed, config);
    manifest.input(&dwi_stem.with_extension("json"))?;
    manifest.input(&dwi_stem.with_extension("raw"))?;
    manifest.write(out_dir)?;
    println!("fit-sh: lmax {lmax} -> {} coefficients per voxel", sh.n_coeffs);
    Ok(())
}

pub fn cmd_train(
    config: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    seed: u64,
) -> Result<(), CliError> {
    ensure_dir(out_dir)?;
    let sh_stem = data_dir.join("sh");
    let sh = read_volume(&sh_stem).map_err(CliError::usage_from)?.to_sh();
    let gt_path = data_dir.join("gt.tck");
    let gt = read_tck(&gt_path, sh.grid.voxel_size).map_err(CliError::usage_from)?;

    let mut model_cfg = config.model;
    if model_cfg.sh_coeffs != sh.n_coeffs {
        return Err(CliError::usage(format!(
            "model.sh_coeffs is {} but the SH volume has {} coefficients; align the config with the fit",
            model_cfg.sh_coeffs, sh.n_coeffs
        )));
    }
    model_cfg.sh_coeffs = sh.n_coeffs;

    let mut train_cfg = config.train;
    train_cfg.seed = stage_seed(seed, STAGE_TRAIN);

    let data = prepare_dataset(&sh, &gt, train_cfg.suffix_crops, train_cfg.feature_jitter, train_cfg.seed);
    if data.sequences.is_empty() {
        return Err(CliError::usage("training dataset is empty (no usable streamlines)"));
    }

    let (mut params, mut state) = match resume {
        Some(ckpt) => {
            let loaded = load_checkpoint(ckpt).map_err(CliError::usage_from)?;
            train_cfg.seed = loaded.seed;
            if loaded.params.config != model_cfg {
                return Err(CliError::usage(
                    "checkpoint model configuration differs from the requested one",
                ));
            }
            (loaded.params, loaded.trainer)
        }
        None => {
            let params = ModelParameters::init(model_cfg, train_cfg.seed);
            let state = TrainerState::fresh(&params, &train_cfg);
            (params, state)
        }
    };

    let outcome =
        train_loop(&mut params, &data, &train_cfg, &mut state).map_err(CliError::internal_from)?;
    if !outcome.stopped_early {
        finalize_best(&mut params, &state);
    }

    save_checkpoint(&out_dir.join("checkpoint.ckpt"), &params, &state, train_cfg.seed)
        .map_err(CliError::internal_from)?;
    let mut csv = String::from("epoch,train,val,lr\n");
    for r in &state.log {
        csv.push_str(&format!("{},{:.17e},{:.17e},{:.17e}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    fs::write(out_dir.join("loss.csv"), csv)
        .map_err(|e| CliError::usage(format!("cannot write loss.csv: {e}")))?;

    let mut manifest = ManifestBuilder::new("train", seed, config);
    manifest.input(&sh_stem.with_extension("json"))?;
    manifest.input(&sh_stem.with_extension("raw"))?;
    manifest.input(&gt_path)?;
    manifest.write(out_dir)?;
    let last = state.log.last();
    println!(
        "train: {} epochs, final train {:.5}, val {:.5}{}",
        state.log.len(),
        last.map_or(f64::NAN, |r| r.train_loss),
        last.map_or(f64::NAN, |r| r.val_loss),
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_track(
    config: &RunConfig,
    checkpoint: &Path,
    sh_stem: &Path,
    mask_stem: &Path,
    out_path: &Path,
    seed: u64,
) -> Result<(), CliError> {
    let loaded = load_checkpoint(checkpoint).map_err(CliError::usage_from)?;
    let sh = read_volume(sh_stem).map_err(CliError::usage_from)?.to_sh();
    let mask_vol = read_volume(mask_stem).map_err(CliError::usage_from)?;
    if mask_vol.grid != sh.grid {
        return Err(CliError::usage(format!(
            "mask grid {:?} does not match SH grid {:?}",
            mask_vol.grid, sh.grid
        )));
    }
    let mask = mask_vol.to_mask();
    if loaded.params.config.sh_coeffs != sh.n_coeffs {
        return Err(CliError::usage(format!(
            "checkpoint expects {} SH coefficients, volume has {}",
            loaded.params.config.sh_coeffs, sh.n_coeffs
        )));
    }

    let section = &config.track;
    let tracker_cfg = section.tracker_config();
    let track_seed = stage_seed(seed, STAGE_TRACK);
    let seeds = seed_points(&mask, &sh.grid, tracker_cfg.seeds_per_voxel, &Prng::new(track_seed))
        .map_err(CliError::usage_from)?;
    let predictor = OrientationPredictor::new(&loaded.params, tracker_cfg.sampler);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(section.workers.max(1))
        .build()
        .map_err(|e| CliError::internal(format!("thread pool: {e}")))?;
    let (tractogram, stats) = pool
        .install(|| track(&seeds, &predictor, &sh, &mask, &tracker_cfg, track_seed))
        .map_err(|e| match e {
            ddtrack_core::tracker::TrackError::Model(_) => CliError::internal_from(e),
            other => CliError::usage_from(other),
        })?;

    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    write_tck(out_path, &tractogram, sh.grid.voxel_size).map_err(CliError::usage_from)?;

    let out_dir = out_path.parent().unwrap_or(Path::new("."));
    let mut manifest = ManifestBuilder::new("track", seed, config);
    manifest.input(checkpoint)?;
    manifest.input(&sh_stem.with_extension("raw"))?;
    manifest.input(&mask_stem.with_extension("raw"))?;
    manifest.write(out_dir)?;
    println!(
        "track: {} seeds -> {} streamlines ({} short discarded; stops: mask {}, angle {}, budget {}, degenerate {})",
        stats.n_seeds,
        stats.emitted,
        stats.discarded_short,
        stats.stops_mask_exit,
        stats.stops_angle,
        stats.stops_max_steps,
        stats.stops_degenerate
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    connections: ConnectionReport,
    volumes: VolumeReport,
    wdice_vs_gt: WeightedDice,
}

pub fn cmd_eval(
    config: &RunConfig,
    tck_path: &Path,
    phantom_dir: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<(), CliError> {
    ensure_dir(out_dir)?;
    let mask_vol = read_volume(&phantom_dir.join("wm_mask")).map_err(CliError::usage_from)?;
    let grid = mask_vol.grid;
    let heads_vol = read_volume(&phantom_dir.join("rois_head")).map_err(CliError::usage_from)?;
    let tails_vol = read_volume(&phantom_dir.join("rois_tail")).map_err(CliError::usage_from)?;
    let gt_masks_vol = read_volume(&phantom_dir.join("bundle_masks")).map_err(CliError::usage_from)?;
    for (name, g) in
        [("rois_head", heads_vol.grid), ("rois_tail", tails_vol.grid), ("bundle_masks", gt_masks_vol.grid)]
    {
        if g != grid {
            return Err(CliError::usage(format!(
                "{name} grid {g:?} does not match wm_mask grid {grid:?}"
            )));
        }
    }
    let meta: BundleMeta = serde_json::from_slice(
        &fs::read(phantom_dir.join("bundles.json"))
            .map_err(|e| CliError::usage(format!("cannot read bundles.json: {e}")))?,
    )
    .map_err(|e| CliError::usage(format!("bundles.json invalid: {e}")))?;

    let tracked = read_tck(tck_path, grid.voxel_size).map_err(CliError::usage_from)?;
    let gt = read_tck(&phantom_dir.join("gt.tck"), grid.voxel_size).map_err(CliError::usage_from)?;

    if tracked.is_empty() {
        eprintln!("warning: empty tractogram; emitting an all-zero report");
    }
    let rois = RoiSet {
        grid,
        bundle_names: meta.names.clone(),
        heads: heads_vol.to_mask_stack(),
        tails: tails_vol.to_mask_stack(),
    };
    let connections = classify_connections(&tracked, &rois).map_err(CliError::usage_from)?;
    let gt_masks = gt_masks_vol.to_mask_stack();
    let volumes =
        volume_scores(&tracked, &connections.per_bundle_vc, &gt_masks, &meta.names, &grid)
            .map_err(CliError::usage_from)?;
    let wdice_vs_gt = weighted_dice(&tracked, &gt, &grid);

    let report = EvalReport { connections, volumes, wdice_vs_gt };
    fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_vec_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| CliError::usage(format!("cannot write metrics.json: {e}")))?;

    let mut csv = String::from("bundle,overlap,overreach,f1,vc_streamlines\n");
    for b in &report.volumes.per_bundle {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            b.name, b.overlap, b.overreach, b.f1, b.vc_streamlines
        ));
    }
    csv.push_str(&format!(
        "MEAN,{:.6},{:.6},{:.6},{}\n",
        report.volumes.mean_overlap,
        report.volumes.mean_overreach,
        report.volumes.mean_f1,
        report.connections.vc_count
    ));
    csv.push_str(&format!(
        "FRACTIONS,vc={:.6},ic={:.6},nc={:.6},wdice={:.6}\n",
        report.connections.vc_fraction,
        report.connections.ic_fraction,
        report.connections.nc_fraction,
        report.wdice_vs_gt.value
    ));
    fs::write(out_dir.join("metrics.csv"), csv)
        .map_err(|e| CliError::usage(format!("cannot write metrics.csv: {e}")))?;

    let mut manifest = ManifestBuilder::new("eval", seed, config);
    manifest.input(tck_path)?;
    manifest.input(&phantom_dir.join("gt.tck"))?;
    manifest.write(out_dir)?;
    println!(
        "eval: VC {:.3} IC {:.3} NC {:.3} | mean OL {:.3} OR {:.3} F1 {:.3} | wDice {:.3}",
        report.connections.vc_fraction,
        report.connections.ic_fraction,
        report.connections.nc_fraction,
        report.volumes.mean_overlap,
        report.volumes.mean_overreach,
        report.volumes.mean_f1,
        report.wdice_vs_gt.value
    );
    Ok(())
}
