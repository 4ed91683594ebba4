use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sh_basis_matrix, ShBasisConfig, ShError, ShVolume};
use crate::grid::Grid;
use crate::scalar::Scalar;

/// b-values at or below this (s/mm^2) count as b0 acquisitions.
pub const B0_THRESHOLD: f64 = 1.0;

/// Acquisition scheme: one (b-value, unit direction) per volume channel.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GradientScheme {
    pub bvecs: Vec<[f64; 3]>,
    pub bvals: Vec<f64>,
}

impl GradientScheme {
    pub fn new(bvecs: Vec<[f64; 3]>, bvals: Vec<f64>) -> Result<Self, ShError> {
        let scheme = GradientScheme { bvecs, bvals };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn validate(&self) -> Result<(), ShError> {
        if self.bvecs.len() != self.bvals.len() {
            return Err(ShError::BadScheme(format!(
                "{} bvecs vs {} bvals",
                self.bvecs.len(),
                self.bvals.len()
            )));
        }
        for (i, (v, &b)) in self.bvecs.iter().zip(&self.bvals).enumerate() {
            if b > B0_THRESHOLD {
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(ShError::NotUnit { index: i, norm });
                }
            }
        }
        if self.b0_indices().is_empty() {
            return Err(ShError::BadScheme("no b0 volume in scheme".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.bvals.len()).filter(|&i| self.bvals[i] <= B0_THRESHOLD).collect()
    }

    pub fn dw_indices(&self) -> Vec<usize> {
        (0..self.bvals.len()).filter(|&i| self.bvals[i] > B0_THRESHOLD).collect()
    }
}

/// 4D diffusion-weighted volume, voxel-major: `data[voxel * n_channels + c]`.
#[derive(Clone, Debug)]
pub struct DwiVolume<T> {
    pub grid: Grid,
    pub scheme: GradientScheme,
    pub data: Vec<T>,
}

impl<T: Scalar> DwiVolume<T> {
    pub fn new(grid: Grid, scheme: GradientScheme, data: Vec<T>) -> Result<Self, ShError> {
        let expect = grid.num_voxels() * scheme.len();
        if data.len() != expect {
            return Err(ShError::BadVolume(format!(
                "payload {} values, expected {} ({} voxels x {} channels)",
                data.len(),
                expect,
                grid.num_voxels(),
                scheme.len()
            )));
        }
        Ok(DwiVolume { grid, scheme, data })
    }

    pub fn channels(&self, voxel: usize) -> &[T] {
        let n = self.scheme.len();
        &self.data[voxel * n..(voxel + 1) * n]
    }
}

/// Per-voxel b0-normalized diffusion-weighted signals.
pub struct NormalizedDwi<T> {
    pub grid: Grid,
    /// Row per voxel, one value per non-b0 direction.
    pub signals: Vec<T>,
    pub n_dw: usize,
    /// Voxels whose mean b0 fell below the floor; they yield zero coefficients.
    pub flagged: Vec<bool>,
}

/// Divides each DW value by the voxel's mean b0. Voxels whose b0 mean falls
/// below `floor_frac * max(b0)` are flagged and produce zero signals.
pub fn normalize_dwi<T: Scalar>(dwi: &DwiVolume<T>, floor_frac: f64) -> NormalizedDwi<T> {
    let b0_idx = dwi.scheme.b0_indices();
    let dw_idx = dwi.scheme.dw_indices();
    let n_vox = dwi.grid.num_voxels();

    let mut max_b0 = T::zero();
    for v in 0..n_vox {
        let ch = dwi.channels(v);
        for &i in &b0_idx {
            if ch[i] > max_b0 {
                max_b0 = ch[i];
            }
        }
    }
    let floor = T::of(floor_frac) * max_b0;

    let mut signals = vec![T::zero(); n_vox * dw_idx.len()];
    let mut flagged = vec![false; n_vox];
    let nb0 = T::of(b0_idx.len() as f64);
    for v in 0..n_vox {
        let ch = dwi.channels(v);
        let b0_mean = b0_idx.iter().fold(T::zero(), |acc, &i| acc + ch[i]) / nb0;
        if b0_mean <= floor || !b0_mean.is_finite() {
            flagged[v] = true;
            continue;
        }
        let row = &mut signals[v * dw_idx.len()..(v + 1) * dw_idx.len()];
        for (slot, &i) in row.iter_mut().zip(&dw_idx) {
            *slot = ch[i] / b0_mean;
        }
    }
    NormalizedDwi { grid: dwi.grid, signals, n_dw: dw_idx.len(), flagged }
}

/// Cholesky factor of a symmetric positive-definite matrix, lower triangular.
struct Cholesky<T> {
    n: usize,
    l: Vec<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Fails when a pivot collapses relative to the largest diagonal entry.
    fn factor(a: &[T], n: usize) -> Option<Self> {
        let mut l = vec![T::zero(); n * n];
        let max_diag = (0..n).fold(T::zero(), |acc, i| acc.max(a[i * n + i].abs()));
        let tiny = T::of(1e-12) * max_diag.max(T::of(1e-300));
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s = s - l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= tiny {
                        return None;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Some(Cholesky { n, l })
    }

    fn solve(&self, b: &[T], out: &mut [T]) {
        let n = self.n;
        // L y = b
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s = s - self.l[i * n + k] * out[k];
            }
            out[i] = s / self.l[i * n + i];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let mut s = out[i];
            for k in i + 1..n {
                s = s - self.l[k * n + i] * out[k];
            }
            out[i] = s / self.l[i * n + i];
        }
    }
}

/// Default fraction of the volume's maximum b0 used as the division floor.
pub const DEFAULT_B0_FLOOR_FRAC: f64 = 1e-6;

/// Least-squares SH fit per voxel with optional Laplace-Beltrami damping:
/// minimizes |B c - s|^2 + reg |L c|^2 over the non-b0 directions.
pub fn fit_sh<T: Scalar>(
    dwi: &DwiVolume<T>,
    config: ShBasisConfig,
    reg: f64,
) -> Result<ShVolume<T>, ShError> {
    dwi.scheme.validate()?;
    let m = config.n_coeffs();
    let dw_idx = dwi.scheme.dw_indices();
    if reg == 0.0 && dw_idx.len() < m {
        return Err(ShError::TooFewDirections { need: m, got: dw_idx.len(), lmax: config.l_max });
    }
    let dirs: Vec<[T; 3]> = dw_idx
        .iter()
        .map(|&i| {
            let v = dwi.scheme.bvecs[i];
            [T::of(v[0]), T::of(v[1]), T::of(v[2])]
        })
        .collect();
    let basis = sh_basis_matrix(&dirs, config)?;
    let n = dirs.len();

    // Normal equations B^T B + reg * diag(l(l+1))^2, shared by every voxel.
    let mut a = vec![T::zero(); m * m];
    for r in 0..n {
        let row = basis.row(r);
        for i in 0..m {
            for j in 0..=i {
                a[i * m + j] = a[i * m + j] + row[i] * row[j];
            }
        }
    }
    for i in 0..m {
        for j in i + 1..m {
            a[i * m + j] = a[j * m + i];
        }
    }
    let lb = config.laplace_beltrami();
    for i in 0..m {
        let w = T::of(lb[i]);
        a[i * m + i] = a[i * m + i] + T::of(reg) * w * w;
    }
    let chol = Cholesky::factor(&a, m)
        .ok_or(ShError::RankDeficient { voxel: dwi.grid.voxel_at(0) })?;

    let normalized = normalize_dwi(dwi, DEFAULT_B0_FLOOR_FRAC);
    let n_vox = dwi.grid.num_voxels();
    let mut coeffs = vec![T::zero(); n_vox * m];

    coeffs.par_chunks_mut(m).enumerate().for_each(|(v, out)| {
        if normalized.flagged[v] {
            return; // zero coefficients for flagged background voxels
        }
        let s = &normalized.signals[v * n..(v + 1) * n];
        let mut rhs = vec![T::zero(); m];
        for (r, &sv) in s.iter().enumerate() {
            let row = basis.row(r);
            for j in 0..m {
                rhs[j] = rhs[j] + row[j] * sv;
            }
        }
        chol.solve(&rhs, out);
    });

    Ok(ShVolume { grid: dwi.grid, n_coeffs: m, coeffs })
}
