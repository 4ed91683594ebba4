use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PhantomError;
use crate::grid::Grid;
use crate::streamline::{add3, dot3, norm3, normalize3, scale3, sub3, Point, Tractogram};

/// Open polyline with precomputed cumulative arclength.
#[derive(Clone, Debug)]
pub struct Polyline {
    pub points: Vec<Point>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Self {
        let mut cum = Vec::with_capacity(points.len());
        let mut s = 0.0;
        cum.push(0.0);
        for w in points.windows(2) {
            s += norm3(sub3(w[1], w[0]));
            cum.push(s);
        }
        Polyline { points, cum }
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }

    pub fn first(&self) -> Point {
        self.points[0]
    }

    pub fn last(&self) -> Point {
        *self.points.last().unwrap()
    }

    /// Closest point on the polyline: (distance, arclength, unit tangent of
    /// the nearest segment).
    pub fn nearest(&self, p: Point) -> (f64, f64, Point) {
        let mut best_d2 = f64::INFINITY;
        let mut best_s = 0.0;
        let mut best_tan = [1.0, 0.0, 0.0];
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let b = self.points[i + 1];
            let ab = sub3(b, a);
            let len2 = dot3(ab, ab);
            if len2 == 0.0 {
                continue;
            }
            let t = (dot3(sub3(p, a), ab) / len2).clamp(0.0, 1.0);
            let q = add3(a, scale3(ab, t));
            let d = sub3(p, q);
            let d2 = dot3(d, d);
            if d2 < best_d2 {
                best_d2 = d2;
                best_s = self.cum[i] + t * len2.sqrt();
                best_tan = normalize3(ab).unwrap();
            }
        }
        (best_d2.sqrt(), best_s, best_tan)
    }
}

/// Tube bundle around a polyline centerline, in voxel coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleSpec {
    pub name: String,
    /// Polyline control points (continuous voxel coordinates).
    pub centerline: Vec<[f64; 3]>,
    /// Tube radius in voxels.
    pub radius: f64,
    /// Relative volume fraction weight where bundles overlap.
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl BundleSpec {
    fn validate(&self, grid: &Grid) -> Result<(), PhantomError> {
        if self.centerline.len() < 2 {
            return Err(PhantomError::BadSpec {
                name: self.name.clone(),
                reason: format!("centerline has {} points, need at least 2", self.centerline.len()),
            });
        }
        if !(self.radius > 0.0) {
            return Err(PhantomError::BadSpec {
                name: self.name.clone(),
                reason: format!("radius {} not positive", self.radius),
            });
        }
        if !(self.weight > 0.0) {
            return Err(PhantomError::BadSpec {
                name: self.name.clone(),
                reason: format!("weight {} not positive", self.weight),
            });
        }
        for p in &self.centerline {
            for a in 0..3 {
                if p[a] - self.radius < 0.0 || p[a] + self.radius > grid.dims[a] as f64 {
                    return Err(PhantomError::BundleOutsideVolume { name: self.name.clone() });
                }
            }
        }
        Ok(())
    }
}

/// One fiber population inside a voxel.
#[derive(Clone, Copy, Debug)]
pub struct Compartment {
    pub orientation: [f64; 3],
    pub fraction: f64,
}

/// Complete synthetic dataset: geometry, masks, ROIs, and (once generated)
/// the reference tractogram.
#[derive(Clone, Debug)]
pub struct PhantomDataset {
    pub grid: Grid,
    pub specs: Vec<BundleSpec>,
    pub centerlines: Vec<Polyline>,
    /// Per-voxel fiber populations; empty for background.
    pub compartments: Vec<Vec<Compartment>>,
    pub wm_mask: Vec<bool>,
    /// Analytic tube mask per bundle.
    pub bundle_masks: Vec<Vec<bool>>,
    pub head_rois: Vec<Vec<bool>>,
    pub tail_rois: Vec<Vec<bool>>,
    pub gt_tractogram: Tractogram,
}

/// Endpoint ROI radius in voxels around each centerline end. The ball is
/// not clipped to the bundle mask: the tracker keeps the mask-exiting point
/// as a streamline endpoint, so connection ROIs must cover the one-step
/// exit shell just past the tube cap (up to ~bundle radius + step + half a
/// voxel diagonal from the centerline end).
pub const ROI_RADIUS: f64 = 3.5;

pub const DEFAULT_BUNDLE_RADIUS: f64 = 2.0;

pub fn default_grid() -> Grid {
    Grid::isotropic([40, 40, 40], 2.0)
}

/// Quarter-arc centerline in a constant-z plane, densely sampled so segment
/// tangents track the analytic tangent to ~1e-3.
pub fn arc_centerline(center: [f64; 2], arc_radius: f64, z: f64, n_points: usize) -> Vec<[f64; 3]> {
    (0..n_points)
        .map(|i| {
            let t = std::f64::consts::FRAC_PI_2 * i as f64 / (n_points - 1) as f64;
            [center[0] + arc_radius * t.cos(), center[1] + arc_radius * t.sin(), z]
        })
        .collect()
}

/// The default three-bundle layout: a straight tube, a second straight tube
/// crossing it at 60 degrees in the same plane, and a quarter arc in a
/// separate plane.
pub fn default_bundle_specs() -> Vec<BundleSpec> {
    let r = DEFAULT_BUNDLE_RADIUS;
    let straight = BundleSpec {
        name: "straight".into(),
        centerline: vec![[6.0, 20.0, 10.5], [34.0, 20.0, 10.5]],
        radius: r,
        weight: 1.0,
    };
    // Unit direction at 60 degrees to +x, half-length 11.5 around (20, 20).
    let (c, s) = (0.5, 3f64.sqrt() / 2.0);
    let half = 11.5;
    let cross = BundleSpec {
        name: "cross60".into(),
        centerline: vec![
            [20.0 - c * half, 20.0 - s * half, 10.5],
            [20.0 + c * half, 20.0 + s * half, 10.5],
        ],
        radius: r,
        weight: 1.0,
    };
    let arc = BundleSpec {
        name: "arc".into(),
        centerline: arc_centerline([10.0, 10.0], 15.0, 28.5, 2048),
        radius: r,
        weight: 1.0,
    };
    vec![straight, cross, arc]
}

/// Rasterizes bundle tubes into per-voxel compartments, masks, and endpoint
/// ROIs. Voxel membership is tested at voxel centers.
pub fn build_phantom(specs: Vec<BundleSpec>, grid: Grid) -> Result<PhantomDataset, PhantomError> {
    for spec in &specs {
        spec.validate(&grid)?;
    }
    let centerlines: Vec<Polyline> =
        specs.iter().map(|s| Polyline::new(s.centerline.clone())).collect();
    let n_vox = grid.num_voxels();
    let n_bundles = specs.len();

    // (bundle claims, compartments) per voxel, parallel over voxels.
    let per_voxel: Vec<Vec<(usize, [f64; 3])>> = (0..n_vox)
        .into_par_iter()
        .map(|v| {
            let center = grid.center_of(grid.voxel_at(v));
            let mut claims = Vec::new();
            for (b, line) in centerlines.iter().enumerate() {
                let (dist, _, tangent) = line.nearest(center);
                if dist <= specs[b].radius {
                    claims.push((b, tangent));
                }
            }
            claims
        })
        .collect();

    let mut compartments = vec![Vec::new(); n_vox];
    let mut wm_mask = vec![false; n_vox];
    let mut bundle_masks = vec![vec![false; n_vox]; n_bundles];
    for (v, claims) in per_voxel.iter().enumerate() {
        if claims.is_empty() {
            continue;
        }
        wm_mask[v] = true;
        let total: f64 = claims.iter().map(|&(b, _)| specs[b].weight).sum();
        for &(b, tangent) in claims {
            bundle_masks[b][v] = true;
            compartments[v].push(Compartment {
                orientation: tangent,
                fraction: specs[b].weight / total,
            });
        }
    }

    let mut head_rois = Vec::with_capacity(n_bundles);
    let mut tail_rois = Vec::with_capacity(n_bundles);
    for (b, line) in centerlines.iter().enumerate() {
        let mut head = vec![false; n_vox];
        let mut tail = vec![false; n_vox];
        for v in 0..n_vox {
            let c = grid.center_of(grid.voxel_at(v));
            if norm3(sub3(c, line.first())) <= ROI_RADIUS {
                head[v] = true;
            }
            if norm3(sub3(c, line.last())) <= ROI_RADIUS {
                tail[v] = true;
            }
        }
        if !head.iter().any(|&x| x) {
            return Err(PhantomError::EmptyRoi { name: specs[b].name.clone(), which: "head" });
        }
        if !tail.iter().any(|&x| x) {
            return Err(PhantomError::EmptyRoi { name: specs[b].name.clone(), which: "tail" });
        }
        if head.iter().zip(&tail).any(|(&h, &t)| h && t) {
            return Err(PhantomError::RoisOverlap { name: specs[b].name.clone() });
        }
        head_rois.push(head);
        tail_rois.push(tail);
    }

    Ok(PhantomDataset {
        grid,
        specs,
        centerlines,
        compartments,
        wm_mask,
        bundle_masks,
        head_rois,
        tail_rois,
        gt_tractogram: Tractogram::default(),
    })
}
