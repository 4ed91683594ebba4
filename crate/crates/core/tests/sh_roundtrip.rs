//! Round-trip oracles for the SH fit: synthesize signals from known
//! coefficients, fit, and compare.

use ddtrack_core::grid::Grid;
use ddtrack_core::phantom::default_scheme;
use ddtrack_core::rng::Prng;
use ddtrack_core::sh::{fit_sh, sh_basis_matrix, DwiVolume, ShBasisConfig};

fn scheme_dirs() -> Vec<[f64; 3]> {
    let scheme = default_scheme();
    scheme.dw_indices().iter().map(|&i| scheme.bvecs[i]).collect()
}

#[test]
fn basis_generated_signals_recovered_exactly() {
    let cfg = ShBasisConfig::new(6).unwrap();
    let m = cfg.n_coeffs();
    assert_eq!(m, 28);
    let scheme = default_scheme();
    let basis = sh_basis_matrix(&scheme_dirs(), cfg).unwrap();

    let grid = Grid::isotropic([3, 2, 2], 1.0);
    let mut rng = Prng::new(404);
    let mut truth = Vec::new();
    let mut data = Vec::with_capacity(grid.num_voxels() * scheme.len());
    let b0 = 500.0;
    for _ in 0..grid.num_voxels() {
        let c: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let signals = basis.apply(&c);
        // Two b0 channels, then DW channels scaled by b0 so normalization
        // divides back to the raw basis signal.
        data.push(b0);
        data.push(b0);
        data.extend(signals.iter().map(|s| s * b0));
        truth.push(c);
    }
    let dwi = DwiVolume::new(grid, scheme, data).unwrap();
    let sh = fit_sh(&dwi, cfg, 0.0).unwrap();
    for v in 0..grid.num_voxels() {
        let got = sh.voxel_coeffs(v);
        for j in 0..m {
            assert!(
                (got[j] - truth[v][j]).abs() < 1e-8,
                "voxel {v} coeff {j}: {} vs {}",
                got[j],
                truth[v][j]
            );
        }
    }
}

#[test]
fn constant_signal_is_pure_dc() {
    let cfg = ShBasisConfig::new(6).unwrap();
    let scheme = default_scheme();
    let grid = Grid::isotropic([2, 2, 1], 1.0);
    let mut data = Vec::new();
    for _ in 0..grid.num_voxels() {
        data.extend(std::iter::repeat(900.0).take(scheme.len()));
    }
    let dwi = DwiVolume::new(grid, scheme, data).unwrap();
    let sh = fit_sh(&dwi, cfg, 0.0).unwrap();
    let two_sqrt_pi = 2.0 * std::f64::consts::PI.sqrt();
    for v in 0..grid.num_voxels() {
        let c = sh.voxel_coeffs(v);
        assert!((c[0] - two_sqrt_pi).abs() < 1e-10, "c0 {} vs {}", c[0], two_sqrt_pi);
        for (j, &cj) in c.iter().enumerate().skip(1) {
            assert!(cj.abs() < 1e-10, "coeff {j} = {cj}");
        }
    }
}

#[test]
fn flagged_background_yields_zero_coefficients() {
    let cfg = ShBasisConfig::new(4).unwrap();
    let scheme = default_scheme();
    let grid = Grid::isotropic([2, 1, 1], 1.0);
    let mut data = Vec::new();
    // Voxel 0: normal signal. Voxel 1: dead b0.
    data.extend(std::iter::repeat(800.0).take(scheme.len()));
    data.extend(std::iter::repeat(0.0).take(scheme.len()));
    let dwi = DwiVolume::new(grid, scheme, data).unwrap();
    let sh = fit_sh(&dwi, cfg, 0.0).unwrap();
    assert!(sh.voxel_coeffs(0)[0] > 1.0);
    assert!(sh.voxel_coeffs(1).iter().all(|&c| c == 0.0));
}

#[test]
fn laplace_beltrami_regularization_shrinks_high_orders() {
    let cfg = ShBasisConfig::new(6).unwrap();
    let m = cfg.n_coeffs();
    let scheme = default_scheme();
    let basis = sh_basis_matrix(&scheme_dirs(), cfg).unwrap();
    let grid = Grid::isotropic([1, 1, 1], 1.0);
    let mut rng = Prng::new(11);
    let c: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
    let signals = basis.apply(&c);
    let mut data = vec![1000.0, 1000.0];
    data.extend(signals.iter().map(|s| s * 1000.0));
    let dwi = DwiVolume::new(grid, scheme, data).unwrap();

    let plain = fit_sh(&dwi, cfg, 0.0).unwrap();
    let damped = fit_sh(&dwi, cfg, 1e-2).unwrap();
    // DC term is untouched by the penalty (l = 0); order-6 terms shrink.
    let pairs = cfg.index_pairs();
    let hi: Vec<usize> =
        (0..m).filter(|&j| pairs[j].0 == 6).collect();
    let energy = |v: &[f64]| hi.iter().map(|&j| v[j] * v[j]).sum::<f64>();
    assert!(energy(damped.voxel_coeffs(0)) < energy(plain.voxel_coeffs(0)));
}
