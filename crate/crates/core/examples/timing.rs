//! Rough wall-clock probe for the training and tracking inner loops at the
//! default model dimensions. Run with `cargo run --example timing`.

use std::time::Instant;

use ddtrack_core::model::{
    prepare_dataset, train_loop, ModelConfig, ModelParameters, OrientationPredictor, TrainConfig,
    TrainerState,
};
use ddtrack_core::phantom::{
    build_phantom, default_bundle_specs, default_grid, default_scheme, generate_gt_tractogram,
    simulate_dwi, TensorModelParams,
};
use ddtrack_core::rng::Prng;
use ddtrack_core::sh::{fit_sh, ShBasisConfig};
use ddtrack_core::tracker::{seed_points, track, TrackerConfig};

fn main() {
    let t0 = Instant::now();
    let mut phantom = build_phantom(default_bundle_specs(), default_grid()).unwrap();
    let mut rng = Prng::new(1);
    let stats = generate_gt_tractogram(&mut phantom, 1.0, 60, &mut rng).unwrap();
    println!(
        "phantom+gt: {:.2?} ({} wm voxels, {} streamlines, {:?} discards)",
        t0.elapsed(),
        phantom.wm_mask.iter().filter(|&&m| m).count(),
        phantom.gt_tractogram.len(),
        stats.discarded
    );

    let t1 = Instant::now();
    let dwi =
        simulate_dwi(&phantom, &default_scheme(), TensorModelParams::default(), Some(20.0), 2)
            .unwrap();
    println!("simulate_dwi: {:.2?}", t1.elapsed());

    let t2 = Instant::now();
    let sh = fit_sh(&dwi, ShBasisConfig::new(6).unwrap(), 0.0).unwrap();
    println!("fit_sh: {:.2?}", t2.elapsed());

    let t3 = Instant::now();
    let data = prepare_dataset(&sh, &phantom.gt_tractogram, 1, 0.9, 3);
    let samples: usize = data.sequences.iter().map(|s| s.targets.len()).sum();
    println!(
        "prepare_dataset: {:.2?} ({} sequences, {} samples)",
        t3.elapsed(),
        data.sequences.len(),
        samples
    );

    let mut params = ModelParameters::init(ModelConfig::default(), 4);
    let config = TrainConfig {
        epochs: 1,
        batch_size: 6,
        lr: 1e-3,
        grad_chunks: 2,
        val_fraction: 0.15,
        ..TrainConfig::default()
    };
    let mut state = TrainerState::fresh(&params, &config);
    let t4 = Instant::now();
    train_loop(&mut params, &data, &config, &mut state).unwrap();
    let per_epoch = t4.elapsed();
    println!(
        "one epoch: {:.2?} ({:.2} ms/sample)",
        per_epoch,
        per_epoch.as_secs_f64() * 1000.0 / samples as f64
    );

    let tracker_cfg = TrackerConfig::default();
    let seeds = seed_points(&phantom.wm_mask, &phantom.grid, 5, &Prng::new(9)).unwrap();
    println!("seeds: {}", seeds.len());
    let predictor = OrientationPredictor::new(&params, tracker_cfg.sampler);
    let t5 = Instant::now();
    let subset = &seeds[..400.min(seeds.len())];
    let (tractogram, tstats) = track(subset, &predictor, &sh, &phantom.wm_mask, &tracker_cfg, 7).unwrap();
    let dt = t5.elapsed();
    let total_points: usize = tractogram.streamlines.iter().map(|s| s.len()).sum();
    println!(
        "track {} seeds: {:.2?} ({} streamlines, {} points, {:.2} ms/step, degenerate {})",
        subset.len(),
        dt,
        tractogram.len(),
        total_points,
        dt.as_secs_f64() * 1000.0 / total_points.max(1) as f64,
        tstats.stops_degenerate
    );
    let projected = dt.as_secs_f64() * seeds.len() as f64 / subset.len() as f64;
    println!("projected full tracking: {projected:.1} s");
}
