use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PhantomDataset, PhantomError};
use crate::rng::Prng;
use crate::sh::{DwiVolume, GradientScheme};
use crate::Real;

/// Cylindrically symmetric diffusion tensor eigenvalues (mm^2/s) and the
/// unweighted baseline signal.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TensorModelParams {
    pub lambda_parallel: f64,
    pub lambda_perp: f64,
    pub s0: f64,
}

impl Default for TensorModelParams {
    fn default() -> Self {
        // Canonical white-matter values.
        TensorModelParams { lambda_parallel: 1.7e-3, lambda_perp: 0.3e-3, s0: 1000.0 }
    }
}

impl TensorModelParams {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(self.lambda_parallel > self.lambda_perp && self.lambda_perp > 0.0) {
            return Err(PhantomError::BadTensorParams {
                parallel: self.lambda_parallel,
                perp: self.lambda_perp,
            });
        }
        Ok(())
    }

    /// Mean diffusivity used for isotropic background voxels.
    pub fn mean_diffusivity(&self) -> f64 {
        (self.lambda_parallel + 2.0 * self.lambda_perp) / 3.0
    }
}

/// Multi-tensor forward model over the phantom's per-voxel compartments:
/// `S(g) = S0 sum_i f_i exp(-b (l_perp + (l_par - l_perp) (g . u_i)^2))`,
/// with isotropic background signal outside the mask. With `snr` given,
/// Rician noise of sigma = S0 / snr corrupts every channel; each voxel draws
/// from its own counter stream, so the result is independent of scheduling.
pub fn simulate_dwi(
    phantom: &PhantomDataset,
    scheme: &GradientScheme,
    params: TensorModelParams,
    snr: Option<f64>,
    seed: u64,
) -> Result<DwiVolume<Real>, PhantomError> {
    params.validate()?;
    let n_ch = scheme.len();
    let n_vox = phantom.grid.num_voxels();
    let rng_root = Prng::new(seed);
    let sigma = snr.map(|s| params.s0 / s);
    let delta = params.lambda_parallel - params.lambda_perp;
    let md = params.mean_diffusivity();

    let mut data = vec![0.0; n_vox * n_ch];
    data.par_chunks_mut(n_ch).enumerate().for_each(|(v, out)| {
        let comps = &phantom.compartments[v];
        for (c, slot) in out.iter_mut().enumerate() {
            let b = scheme.bvals[c];
            let g = scheme.bvecs[c];
            let signal = if b <= crate::sh::B0_THRESHOLD {
                params.s0
            } else if comps.is_empty() {
                params.s0 * (-b * md).exp()
            } else {
                comps
                    .iter()
                    .map(|comp| {
                        let gu = g[0] * comp.orientation[0]
                            + g[1] * comp.orientation[1]
                            + g[2] * comp.orientation[2];
                        comp.fraction * (-b * (params.lambda_perp + delta * gu * gu)).exp()
                    })
                    .sum::<f64>()
                    * params.s0
            };
            *slot = signal;
        }
        if let Some(sigma) = sigma {
            let mut rng = rng_root.split(v as u64);
            for slot in out.iter_mut() {
                let n1 = sigma * rng.normal();
                let n2 = sigma * rng.normal();
                *slot = ((*slot + n1) * (*slot + n1) + n2 * n2).sqrt();
            }
        }
    });

    Ok(DwiVolume::new(phantom.grid, scheme.clone(), data).expect("consistent payload"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::phantom::{build_phantom, default_scheme, BundleSpec};

    fn single_fiber_phantom() -> PhantomDataset {
        let grid = Grid::isotropic([12, 8, 8], 1.0);
        let spec = BundleSpec {
            name: "x".into(),
            centerline: vec![[2.0, 4.0, 4.0], [10.0, 4.0, 4.0]],
            radius: 1.5,
            weight: 1.0,
        };
        build_phantom(vec![spec], grid).unwrap()
    }

    #[test]
    fn attenuation_along_and_across_fiber() {
        let ph = single_fiber_phantom();
        let scheme = GradientScheme::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![0.0, 1000.0, 1000.0],
        )
        .unwrap();
        let dwi = simulate_dwi(&ph, &scheme, TensorModelParams::default(), None, 0).unwrap();
        let v = ph.grid.index([6, 4, 4]);
        let ch = dwi.channels(v);
        assert_eq!(ch[0], 1000.0);
        // Gradient along the fiber: S/S0 = exp(-b * l_par) = exp(-1.7).
        assert!((ch[1] / 1000.0 - (-1.7f64).exp()).abs() < 1e-12);
        assert!((ch[1] / 1000.0 - 0.1827).abs() < 1e-4);
        // Gradient across: S/S0 = exp(-0.3).
        assert!((ch[2] / 1000.0 - (-0.3f64).exp()).abs() < 1e-12);
        assert!((ch[2] / 1000.0 - 0.7408).abs() < 1e-4);
    }

    #[test]
    fn noiseless_is_deterministic_and_antipodal() {
        let ph = single_fiber_phantom();
        let scheme = default_scheme();
        let a = simulate_dwi(&ph, &scheme, TensorModelParams::default(), None, 1).unwrap();
        let b = simulate_dwi(&ph, &scheme, TensorModelParams::default(), None, 2).unwrap();
        assert_eq!(a.data, b.data, "noiseless output must ignore the seed");

        // S(g) = S(-g): flip every direction and compare.
        let flipped = GradientScheme::new(
            scheme.bvecs.iter().map(|v| [-v[0], -v[1], -v[2]]).collect(),
            scheme.bvals.clone(),
        )
        .unwrap();
        let c = simulate_dwi(&ph, &flipped, TensorModelParams::default(), None, 0).unwrap();
        for (x, y) in a.data.iter().zip(&c.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rician_noise_seeded_and_biased_positive() {
        let ph = single_fiber_phantom();
        let scheme = default_scheme();
        let params = TensorModelParams::default();
        let a = simulate_dwi(&ph, &scheme, params, Some(20.0), 7).unwrap();
        let b = simulate_dwi(&ph, &scheme, params, Some(20.0), 7).unwrap();
        assert_eq!(a.data, b.data);
        let c = simulate_dwi(&ph, &scheme, params, Some(20.0), 8).unwrap();
        assert_ne!(a.data, c.data);
        // Magnitude signals are nonnegative by construction.
        assert!(a.data.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn minimizing_direction_is_fiber_orientation() {
        let ph = single_fiber_phantom();
        let scheme = default_scheme();
        let dwi = simulate_dwi(&ph, &scheme, TensorModelParams::default(), None, 0).unwrap();
        let v = ph.grid.index([6, 4, 4]);
        let ch = dwi.channels(v);
        let dw = scheme.dw_indices();
        let (mut best_i, mut best_s) = (0, f64::INFINITY);
        for &i in &dw {
            if ch[i] < best_s {
                best_s = ch[i];
                best_i = i;
            }
        }
        // The most attenuated direction should be the one most aligned with x.
        let most_aligned = *dw
            .iter()
            .max_by(|&&a, &&b| {
                scheme.bvecs[a][0].abs().total_cmp(&scheme.bvecs[b][0].abs())
            })
            .unwrap();
        assert_eq!(best_i, most_aligned);
    }

    #[test]
    fn background_is_isotropic() {
        let ph = single_fiber_phantom();
        let scheme = default_scheme();
        let dwi = simulate_dwi(&ph, &scheme, TensorModelParams::default(), None, 0).unwrap();
        let v = ph.grid.index([0, 0, 0]);
        assert!(ph.compartments[v].is_empty());
        let ch = dwi.channels(v);
        let dw = scheme.dw_indices();
        let want = 1000.0 * (-1000.0 * TensorModelParams::default().mean_diffusivity()).exp();
        for &i in &dw {
            assert!((ch[i] - want).abs() < 1e-9);
        }
    }
}
