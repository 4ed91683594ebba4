//! Full-pipeline calibration probe: phantom -> SH -> train -> track -> score.
//! Knobs via env vars so runs can be compared without recompiling.

use std::time::Instant;

use ddtrack_core::metrics::{classify_connections, coverage_mask, volume_scores, RoiSet};
use ddtrack_core::model::{
    prepare_dataset, train, ModelConfig, ModelParameters, OrientationPredictor, TrainConfig,
};
use ddtrack_core::phantom::{
    build_phantom, default_bundle_specs, default_grid, default_scheme, generate_gt_tractogram,
    simulate_dwi, TensorModelParams,
};
use ddtrack_core::rng::Prng;
use ddtrack_core::sh::{fit_sh, ShBasisConfig};
use ddtrack_core::tracker::{seed_points, track, TrackerConfig};

fn env_or<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let epochs: usize = env_or("E2E_EPOCHS", 10);
    let lr: f64 = env_or("E2E_LR", 1e-3);
    let per_bundle: usize = env_or("E2E_STREAMLINES", 45);
    let snr: f64 = env_or("E2E_SNR", 20.0);
    let seed: u64 = env_or("E2E_SEED", 20260808);

    let t_all = Instant::now();
    let mut phantom = build_phantom(default_bundle_specs(), default_grid()).unwrap();
    let mut rng = Prng::new(seed);
    generate_gt_tractogram(&mut phantom, 1.0, per_bundle, &mut rng).unwrap();
    let wm: usize = phantom.wm_mask.iter().filter(|&&m| m).count();
    println!("wm voxels: {wm}, gt streamlines: {}", phantom.gt_tractogram.len());

    let dwi = simulate_dwi(&phantom, &default_scheme(), TensorModelParams::default(), Some(snr), seed ^ 1)
        .unwrap();
    let sh = fit_sh(&dwi, ShBasisConfig::new(6).unwrap(), 0.0).unwrap();

    let data = prepare_dataset(&sh, &phantom.gt_tractogram, 1, 0.9, seed ^ 2);
    let samples: usize = data.sequences.iter().map(|s| s.targets.len()).sum();
    println!("dataset: {} sequences, {samples} samples", data.sequences.len());

    let mut params = ModelParameters::init(ModelConfig::default(), seed ^ 3);
    let config = TrainConfig {
        epochs,
        batch_size: 4,
        lr,
        grad_chunks: 2,
        val_fraction: 0.15,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let (outcome, _) = train(&mut params, &data, &config).unwrap();
    println!(
        "train {:.1?}: first {:.4}, last {:.4} (val {:.4})",
        t.elapsed(),
        outcome.log.first().unwrap().train_loss,
        outcome.log.last().unwrap().train_loss,
        outcome.log.last().unwrap().val_loss,
    );

    let tracker_cfg = TrackerConfig::default();
    let seeds = seed_points(&phantom.wm_mask, &phantom.grid, 5, &Prng::new(seed ^ 4)).unwrap();
    let predictor = OrientationPredictor::new(&params, tracker_cfg.sampler);
    let t = Instant::now();
    let (tractogram, stats) =
        track(&seeds, &predictor, &sh, &phantom.wm_mask, &tracker_cfg, seed ^ 5).unwrap();
    println!(
        "track {:.1?}: {} seeds -> {} streamlines (short {}, angle {}, degen {})",
        t.elapsed(),
        seeds.len(),
        stats.emitted,
        stats.discarded_short,
        stats.stops_angle,
        stats.stops_degenerate
    );

    let names: Vec<String> = phantom.specs.iter().map(|s| s.name.clone()).collect();
    let rois = RoiSet {
        grid: phantom.grid,
        bundle_names: names.clone(),
        heads: phantom.head_rois.clone(),
        tails: phantom.tail_rois.clone(),
    };
    let labels = phantom.gt_tractogram.labels.clone().unwrap();
    let gt_masks: Vec<Vec<bool>> = (0..names.len())
        .map(|b| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == b).collect();
            coverage_mask(&phantom.gt_tractogram, &idx, &phantom.grid)
        })
        .collect();
    let report = classify_connections(&tractogram, &rois).unwrap();
    let vol = volume_scores(&tractogram, &report.per_bundle_vc, &gt_masks, &names, &phantom.grid)
        .unwrap();
    println!(
        "VC {:.3} IC {:.3} NC {:.3}",
        report.vc_fraction, report.ic_fraction, report.nc_fraction
    );
    for b in &vol.per_bundle {
        println!("  {}: OL {:.3} OR {:.3} F1 {:.3} (vc {})", b.name, b.overlap, b.overreach, b.f1, b.vc_streamlines);
    }
    println!("total {:.1?}", t_all.elapsed());
}
