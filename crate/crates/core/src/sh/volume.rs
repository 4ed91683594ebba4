use crate::grid::Grid;
use crate::scalar::Scalar;

/// Per-voxel SH coefficient volume, voxel-major:
/// `coeffs[voxel * n_coeffs + j]`.
#[derive(Clone, Debug)]
pub struct ShVolume<T> {
    pub grid: Grid,
    pub n_coeffs: usize,
    pub coeffs: Vec<T>,
}

impl<T: Scalar> ShVolume<T> {
    pub fn zeros(grid: Grid, n_coeffs: usize) -> Self {
        let coeffs = vec![T::zero(); grid.num_voxels() * n_coeffs];
        ShVolume { grid, n_coeffs, coeffs }
    }

    pub fn voxel_coeffs(&self, v: usize) -> &[T] {
        &self.coeffs[v * self.n_coeffs..(v + 1) * self.n_coeffs]
    }

    pub fn voxel_coeffs_mut(&mut self, v: usize) -> &mut [T] {
        &mut self.coeffs[v * self.n_coeffs..(v + 1) * self.n_coeffs]
    }

    /// Trilinear interpolation of the coefficient vector at a continuous
    /// voxel coordinate; values live at voxel centers. Returns false and
    /// zero-fills when any interpolation corner leaves the volume.
    pub fn interpolate(&self, p: [f64; 3], out: &mut [T]) -> bool {
        debug_assert_eq!(out.len(), self.n_coeffs);
        let dims = self.grid.dims;
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            let q = p[a] - 0.5;
            if !q.is_finite() || q < 0.0 {
                out.iter_mut().for_each(|v| *v = T::zero());
                return false;
            }
            let b = q.floor();
            if (b as usize) + 1 >= dims[a] {
                // Allow exact landing on the last center plane.
                if q == (dims[a] - 1) as f64 {
                    base[a] = dims[a] - 2;
                    frac[a] = T::one();
                    continue;
                }
                out.iter_mut().for_each(|v| *v = T::zero());
                return false;
            }
            base[a] = b as usize;
            frac[a] = T::of(q - b);
        }
        out.iter_mut().for_each(|v| *v = T::zero());
        for corner in 0..8 {
            let dx = corner & 1;
            let dy = (corner >> 1) & 1;
            let dz = (corner >> 2) & 1;
            let wx = if dx == 1 { frac[0] } else { T::one() - frac[0] };
            let wy = if dy == 1 { frac[1] } else { T::one() - frac[1] };
            let wz = if dz == 1 { frac[2] } else { T::one() - frac[2] };
            let w = wx * wy * wz;
            if w == T::zero() {
                continue;
            }
            let v = self.grid.index([base[0] + dx, base[1] + dy, base[2] + dz]);
            let src = self.voxel_coeffs(v);
            for (o, &s) in out.iter_mut().zip(src) {
                *o = *o + w * s;
            }
        }
        true
    }
}

/// The 3x3x3 neighborhood feature block at a tracking point: for each offset
/// in {-1, 0, 1}^3 (dz slowest, then dy, dx), the interpolated coefficient
/// vector at `p + offset`.
#[derive(Clone, Debug)]
pub struct NeighborhoodFeature<T> {
    pub n_coeffs: usize,
    /// 27 * n_coeffs values, offset-major.
    pub block: Vec<T>,
    /// True when any cell fell outside the volume and was zero-filled.
    pub out_of_bounds: bool,
}

impl<T: Scalar> NeighborhoodFeature<T> {
    pub fn cell(&self, dz: i64, dy: i64, dx: i64) -> &[T] {
        let iz = (dz + 1) as usize;
        let iy = (dy + 1) as usize;
        let ix = (dx + 1) as usize;
        let cell = (iz * 3 + iy) * 3 + ix;
        &self.block[cell * self.n_coeffs..(cell + 1) * self.n_coeffs]
    }

    /// Reorders into channel-major `[m, 3, 3, 3]` (dz, dy, dx spatial axes)
    /// for 3D convolution input.
    pub fn to_channel_major(&self) -> Vec<T> {
        let m = self.n_coeffs;
        let mut out = vec![T::zero(); m * 27];
        for cell in 0..27 {
            for j in 0..m {
                out[j * 27 + cell] = self.block[cell * m + j];
            }
        }
        out
    }
}

/// Samples the 27-cell neighborhood feature at a continuous voxel coordinate.
pub fn sample_neighborhood<T: Scalar>(sh: &ShVolume<T>, p: [f64; 3]) -> NeighborhoodFeature<T> {
    let m = sh.n_coeffs;
    let mut block = vec![T::zero(); 27 * m];
    let mut oob = false;
    let mut cell = 0usize;
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let q = [p[0] + dx as f64, p[1] + dy as f64, p[2] + dz as f64];
                let dst = &mut block[cell * m..(cell + 1) * m];
                if !sh.interpolate(q, dst) {
                    oob = true;
                }
                cell += 1;
            }
        }
    }
    NeighborhoodFeature { n_coeffs: m, block, out_of_bounds: oob }
}
