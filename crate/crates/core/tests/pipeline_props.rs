//! Cross-module properties: oracle tracking over a phantom, ground-truth
//! self-evaluation, and checkpoint-based training resume.

use std::fs;

use ddtrack_core::grid::Grid;
use ddtrack_core::io::{load_checkpoint, save_checkpoint};
use ddtrack_core::metrics::{classify_connections, coverage_mask, volume_scores, weighted_dice, RoiSet};
use ddtrack_core::model::{
    prepare_dataset, train_loop, ModelConfig, ModelParameters, TrainConfig, TrainerState,
};
use ddtrack_core::phantom::{
    build_phantom, default_bundle_specs, default_grid, generate_gt_tractogram, BundleSpec,
};
use ddtrack_core::rng::Prng;
use ddtrack_core::sh::NeighborhoodFeature;
use ddtrack_core::tracker::{seed_points, track, OrientationModel, TrackerConfig};
use ddtrack_core::{Real, ShVolume};

/// Oracle model that follows a bundle's analytic tangent field.
struct TangentOracle {
    line: ddtrack_core::phantom::Polyline,
}

impl OrientationModel for TangentOracle {
    type State = ();
    fn initial_state(&self) {}
    fn predict(
        &self,
        _f: &NeighborhoodFeature<Real>,
        p: [Real; 3],
        _s: &mut (),
        _rng: &mut Prng,
    ) -> Result<[Real; 3], ddtrack_core::model::PredictError> {
        let (_, _, tangent) = self.line.nearest(p);
        Ok(tangent)
    }
}

fn straight_phantom() -> ddtrack_core::phantom::PhantomDataset {
    let grid = Grid::isotropic([24, 12, 12], 1.0);
    let spec = BundleSpec {
        name: "straight".into(),
        centerline: vec![[3.0, 6.0, 6.0], [21.0, 6.0, 6.0]],
        radius: 2.2,
        weight: 1.0,
    };
    build_phantom(vec![spec], grid).unwrap()
}

#[test]
fn oracle_tracking_spans_head_to_tail() {
    let mut phantom = straight_phantom();
    let mut rng = Prng::new(1);
    generate_gt_tractogram(&mut phantom, 1.0, 10, &mut rng).unwrap();

    let sh = ShVolume::zeros(phantom.grid, 1);
    let oracle = TangentOracle { line: phantom.centerlines[0].clone() };
    let seeds = seed_points(&phantom.wm_mask, &phantom.grid, 1, &Prng::new(5)).unwrap();
    let cfg = TrackerConfig::default();
    let (tractogram, stats) = track(&seeds, &oracle, &sh, &phantom.wm_mask, &cfg, 3).unwrap();
    assert!(stats.emitted > 0);

    let rois = RoiSet {
        grid: phantom.grid,
        bundle_names: vec!["straight".into()],
        heads: phantom.head_rois.clone(),
        tails: phantom.tail_rois.clone(),
    };
    let report = classify_connections(&tractogram, &rois).unwrap();
    // Seeds jittered near the tube edge can slip out of the mask before
    // reaching both ROIs, so demand a strong majority rather than all.
    assert!(
        report.vc_fraction > 0.9,
        "vc fraction {} (vc {} / {})",
        report.vc_fraction,
        report.vc_count,
        report.total
    );
}

#[test]
fn gt_self_evaluation_is_exact() {
    let mut phantom = build_phantom(default_bundle_specs(), default_grid()).unwrap();
    let mut rng = Prng::new(7);
    generate_gt_tractogram(&mut phantom, 1.0, 60, &mut rng).unwrap();
    let gt = &phantom.gt_tractogram;
    let grid = phantom.grid;
    let names: Vec<String> = phantom.specs.iter().map(|s| s.name.clone()).collect();

    let rois = RoiSet {
        grid,
        bundle_names: names.clone(),
        heads: phantom.head_rois.clone(),
        tails: phantom.tail_rois.clone(),
    };
    let report = classify_connections(gt, &rois).unwrap();
    assert_eq!(report.vc_fraction, 1.0, "VC must be exactly 1.0");
    assert_eq!(report.ic_count, 0);
    assert_eq!(report.nc_count, 0);

    // Classification must agree with the generator's labels.
    let labels = gt.labels.as_ref().unwrap();
    for (b, list) in report.per_bundle_vc.iter().enumerate() {
        for &i in list {
            assert_eq!(labels[i], b, "streamline {i} classified into the wrong bundle");
        }
    }

    // Evaluation masks are the gt coverage, so OL = 1, OR = 0 exactly.
    let gt_masks: Vec<Vec<bool>> =
        report.per_bundle_vc.iter().map(|l| coverage_mask(gt, l, &grid)).collect();
    let vol = volume_scores(gt, &report.per_bundle_vc, &gt_masks, &names, &grid).unwrap();
    for b in &vol.per_bundle {
        assert_eq!(b.overlap, 1.0);
        assert_eq!(b.overreach, 0.0);
        assert_eq!(b.f1, 1.0);
    }

    let wd = weighted_dice(gt, gt, &grid);
    assert_eq!(wd.value, 1.0);

    // Coverage stays inside the analytic tubes by the seeding margin.
    for (b, mask) in gt_masks.iter().enumerate() {
        for v in 0..grid.num_voxels() {
            if mask[v] {
                assert!(phantom.bundle_masks[b][v], "coverage left the tube at voxel {v}");
            }
        }
    }
}

#[test]
fn checkpoint_resume_reproduces_log_exactly() {
    // Small real pipeline: straight phantom, noiseless signal, tiny model.
    let mut phantom = straight_phantom();
    let mut rng = Prng::new(11);
    generate_gt_tractogram(&mut phantom, 1.0, 6, &mut rng).unwrap();
    let scheme = ddtrack_core::phantom::default_scheme();
    let dwi = ddtrack_core::phantom::simulate_dwi(
        &phantom,
        &scheme,
        ddtrack_core::phantom::TensorModelParams::default(),
        None,
        0,
    )
    .unwrap();
    let sh = ddtrack_core::sh::fit_sh(&dwi, ddtrack_core::sh::ShBasisConfig::new(2).unwrap(), 0.0)
        .unwrap();
    let mut cfg_model = ModelConfig::tiny();
    cfg_model.sh_coeffs = sh.n_coeffs;
    let data = prepare_dataset(&sh, &phantom.gt_tractogram, 0, 0.0, 1);
    let config = TrainConfig {
        epochs: 4,
        batch_size: 2,
        lr: 1e-3,
        grad_chunks: 2,
        seed: 5,
        val_fraction: 0.25,
        ..TrainConfig::default()
    };

    // Uninterrupted run.
    let mut p_full = ModelParameters::init(cfg_model, 3);
    let mut s_full = TrainerState::fresh(&p_full, &config);
    train_loop(&mut p_full, &data, &config, &mut s_full).unwrap();

    // Interrupted at epoch 2, checkpointed to disk, reloaded, resumed.
    let mut p_half = ModelParameters::init(cfg_model, 3);
    let mut s_half = TrainerState::fresh(&p_half, &config);
    let first = TrainConfig { epochs: 2, ..config };
    train_loop(&mut p_half, &data, &first, &mut s_half).unwrap();
    let dir = std::env::temp_dir().join(format!("ddtrack-resume-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    let ckpt = dir.join("mid.ckpt");
    save_checkpoint(&ckpt, &p_half, &s_half, config.seed).unwrap();

    let loaded = load_checkpoint(&ckpt).unwrap();
    let mut p_res = loaded.params;
    let mut s_res = loaded.trainer;
    assert_eq!(loaded.seed, config.seed);
    train_loop(&mut p_res, &data, &config, &mut s_res).unwrap();

    // Identical subsequent log lines and identical final weights, bitwise.
    assert_eq!(s_full.log, s_res.log);
    for ((_, a), (_, b)) in p_full.store.iter().zip(p_res.store.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
