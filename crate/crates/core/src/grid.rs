//! Voxel grid geometry shared across the pipeline.
//!
//! Convention: continuous voxel coordinates span `[0, dims]` per axis, voxel
//! `(i, j, k)` occupies the unit cube `[i, i+1) x [j, j+1) x [k, k+1)` and its
//! center sits at `(i+0.5, j+0.5, k+0.5)`. World millimeters are voxel
//! coordinates scaled by the voxel size, origin at the corner of voxel
//! `(0, 0, 0)`. Volume payloads are row-major with x fastest.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3]) -> Self {
        Grid { dims, voxel_size }
    }

    pub fn isotropic(dims: [usize; 3], voxel_size: f64) -> Self {
        Grid { dims, voxel_size: [voxel_size; 3] }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index, x fastest.
    #[inline]
    pub fn index(&self, v: [usize; 3]) -> usize {
        (v[2] * self.dims[1] + v[1]) * self.dims[0] + v[0]
    }

    #[inline]
    pub fn voxel_at(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    /// Voxel containing a continuous position, or None outside the volume.
    #[inline]
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut v = [0usize; 3];
        for a in 0..3 {
            if !p[a].is_finite() || p[a] < 0.0 {
                return None;
            }
            let i = p[a].floor() as usize;
            if i >= self.dims[a] {
                return None;
            }
            v[a] = i;
        }
        Some(v)
    }

    #[inline]
    pub fn center_of(&self, v: [usize; 3]) -> [f64; 3] {
        [v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5]
    }

    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        [p[0] * self.voxel_size[0], p[1] * self.voxel_size[1], p[2] * self.voxel_size[2]]
    }

    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        [w[0] / self.voxel_size[0], w[1] / self.voxel_size[1], w[2] / self.voxel_size[2]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let g = Grid::isotropic([4, 5, 6], 2.0);
        for idx in 0..g.num_voxels() {
            assert_eq!(g.index(g.voxel_at(idx)), idx);
        }
    }

    #[test]
    fn voxel_of_bounds() {
        let g = Grid::isotropic([4, 4, 4], 1.0);
        assert_eq!(g.voxel_of([0.0, 0.0, 0.0]), Some([0, 0, 0]));
        assert_eq!(g.voxel_of([3.999, 1.0, 2.5]), Some([3, 1, 2]));
        assert_eq!(g.voxel_of([4.0, 0.0, 0.0]), None);
        assert_eq!(g.voxel_of([-0.001, 0.0, 0.0]), None);
        assert_eq!(g.voxel_of([f64::NAN, 0.0, 0.0]), None);
    }

    #[test]
    fn world_conversion() {
        let g = Grid::isotropic([4, 4, 4], 2.0);
        assert_eq!(g.voxel_to_world([1.5, 2.0, 0.5]), [3.0, 4.0, 1.0]);
        assert_eq!(g.world_to_voxel([3.0, 4.0, 1.0]), [1.5, 2.0, 0.5]);
    }
}
