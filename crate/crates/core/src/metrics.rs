//! Streamline- and volume-level scoring against phantom ground truth:
//! connection classification (VC/IC/NC), per-bundle overlap/overreach/F1,
//! and weighted-Dice tract overlap.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::streamline::{Streamline, Tractogram};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("bundle '{0}' has an empty ground-truth mask")]
    EmptyGtMask(String),
    #[error("mask length {got} does not match grid voxel count {want}")]
    GridMismatch { got: usize, want: usize },
}

/// Per-bundle endpoint regions on the reference grid.
#[derive(Clone, Debug)]
pub struct RoiSet {
    pub grid: Grid,
    pub bundle_names: Vec<String>,
    pub heads: Vec<Vec<bool>>,
    pub tails: Vec<Vec<bool>>,
}

impl RoiSet {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let want = self.grid.num_voxels();
        for m in self.heads.iter().chain(&self.tails) {
            if m.len() != want {
                return Err(MetricsError::GridMismatch { got: m.len(), want });
            }
        }
        Ok(())
    }
}

/// Streamline-level classification outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConnectionReport {
    pub total: usize,
    pub vc_count: usize,
    pub ic_count: usize,
    pub nc_count: usize,
    pub vc_fraction: f64,
    pub ic_fraction: f64,
    pub nc_fraction: f64,
    /// Indices of valid streamlines per bundle.
    pub per_bundle_vc: Vec<Vec<usize>>,
}

/// Labels each streamline VC (endpoints in the head/tail pair of one
/// bundle, either order), IC (endpoints in two ROIs that are not a matching
/// pair), or NC (anything else). Membership is tested on the endpoint's
/// containing voxel.
pub fn classify_connections(
    tractogram: &Tractogram,
    rois: &RoiSet,
) -> Result<ConnectionReport, MetricsError> {
    rois.validate()?;
    let grid = rois.grid;
    let n_bundles = rois.heads.len();
    let mut per_bundle_vc = vec![Vec::new(); n_bundles];
    let (mut vc, mut ic, mut nc) = (0usize, 0usize, 0usize);

    for (i, sl) in tractogram.streamlines.iter().enumerate() {
        let ends = match (sl.first(), sl.last()) {
            (Some(a), Some(b)) => (grid.voxel_of(a), grid.voxel_of(b)),
            _ => (None, None),
        };
        let (Some(va), Some(vb)) = ends else {
            nc += 1;
            continue;
        };
        let (ia, ib) = (grid.index(va), grid.index(vb));

        let mut matched = None;
        for b in 0..n_bundles {
            if (rois.heads[b][ia] && rois.tails[b][ib]) || (rois.tails[b][ia] && rois.heads[b][ib])
            {
                matched = Some(b);
                break;
            }
        }
        if let Some(b) = matched {
            vc += 1;
            per_bundle_vc[b].push(i);
            continue;
        }
        let in_any = |v: usize| (0..n_bundles).any(|b| rois.heads[b][v] || rois.tails[b][v]);
        if in_any(ia) && in_any(ib) {
            ic += 1;
        } else {
            nc += 1;
        }
    }

    let total = tractogram.len();
    let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    Ok(ConnectionReport {
        total,
        vc_count: vc,
        ic_count: ic,
        nc_count: nc,
        vc_fraction: frac(vc),
        ic_fraction: frac(ic),
        nc_fraction: frac(nc),
        per_bundle_vc,
    })
}

/// Voxels visited by a streamline, deduplicated, in first-visit order.
pub fn visited_voxels(sl: &Streamline, grid: &Grid) -> Vec<usize> {
    let mut seen = vec![false; grid.num_voxels()];
    let mut hits = Vec::new();
    for &p in &sl.points {
        if let Some(v) = grid.voxel_of(p) {
            let idx = grid.index(v);
            if !seen[idx] {
                seen[idx] = true;
                hits.push(idx);
            }
        }
    }
    hits
}

/// Union of voxels visited by the selected streamlines, as a dense mask.
pub fn coverage_mask(tractogram: &Tractogram, indices: &[usize], grid: &Grid) -> Vec<bool> {
    let mut mask = vec![false; grid.num_voxels()];
    for &i in indices {
        for &p in &tractogram.streamlines[i].points {
            if let Some(v) = grid.voxel_of(p) {
                mask[grid.index(v)] = true;
            }
        }
    }
    mask
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleScores {
    pub name: String,
    pub overlap: f64,
    pub overreach: f64,
    pub f1: f64,
    pub vc_streamlines: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolumeReport {
    pub per_bundle: Vec<BundleScores>,
    pub mean_overlap: f64,
    pub mean_overreach: f64,
    pub mean_f1: f64,
}

/// Voxel-set scores per bundle: overlap |Vr n Vgt| / |Vgt|, overreach
/// |Vr \ Vgt| / |Vgt|, and F1 from precision |Vr n Vgt| / |Vr| and recall =
/// overlap (0 when both factors vanish).
pub fn volume_scores(
    tractogram: &Tractogram,
    per_bundle_vc: &[Vec<usize>],
    gt_masks: &[Vec<bool>],
    bundle_names: &[String],
    grid: &Grid,
) -> Result<VolumeReport, MetricsError> {
    let mut per_bundle = Vec::with_capacity(gt_masks.len());
    for (b, gt) in gt_masks.iter().enumerate() {
        if gt.len() != grid.num_voxels() {
            return Err(MetricsError::GridMismatch { got: gt.len(), want: grid.num_voxels() });
        }
        let gt_size = gt.iter().filter(|&&x| x).count();
        if gt_size == 0 {
            return Err(MetricsError::EmptyGtMask(bundle_names[b].clone()));
        }
        let recon = coverage_mask(tractogram, &per_bundle_vc[b], grid);
        let mut inter = 0usize;
        let mut excess = 0usize;
        let mut recon_size = 0usize;
        for v in 0..grid.num_voxels() {
            if recon[v] {
                recon_size += 1;
                if gt[v] {
                    inter += 1;
                } else {
                    excess += 1;
                }
            }
        }
        let overlap = inter as f64 / gt_size as f64;
        let overreach = excess as f64 / gt_size as f64;
        let precision = if recon_size == 0 { 0.0 } else { inter as f64 / recon_size as f64 };
        let f1 = if precision + overlap == 0.0 {
            0.0
        } else {
            2.0 * precision * overlap / (precision + overlap)
        };
        per_bundle.push(BundleScores {
            name: bundle_names[b].clone(),
            overlap,
            overreach,
            f1,
            vc_streamlines: per_bundle_vc[b].len(),
        });
    }
    let n = per_bundle.len() as f64;
    Ok(VolumeReport {
        mean_overlap: per_bundle.iter().map(|s| s.overlap).sum::<f64>() / n,
        mean_overreach: per_bundle.iter().map(|s| s.overreach).sum::<f64>() / n,
        mean_f1: per_bundle.iter().map(|s| s.f1).sum::<f64>() / n,
        per_bundle,
    })
}

/// Weighted Dice overlap between two tracts.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WeightedDice {
    pub value: f64,
    /// Set when either tract was empty and the score was forced to 0.
    pub empty_input: bool,
}

/// Per-voxel visit weights (each streamline counted at most once per voxel)
/// normalized to sum 1; the score is the weight mass both tracts place on
/// the shared support, divided by the total mass of both tracts.
pub fn weighted_dice(t1: &Tractogram, t2: &Tractogram, grid: &Grid) -> WeightedDice {
    let w1 = visit_weights(t1, grid);
    let w2 = visit_weights(t2, grid);
    let (Some(w1), Some(w2)) = (w1, w2) else {
        return WeightedDice { value: 0.0, empty_input: true };
    };
    let mut numer = 0.0;
    let mut denom = 0.0;
    for v in 0..grid.num_voxels() {
        let (a, b) = (w1[v], w2[v]);
        denom += a + b;
        if a > 0.0 && b > 0.0 {
            numer += a + b;
        }
    }
    WeightedDice { value: if denom == 0.0 { 0.0 } else { numer / denom }, empty_input: false }
}

fn visit_weights(t: &Tractogram, grid: &Grid) -> Option<Vec<f64>> {
    let mut counts = vec![0.0f64; grid.num_voxels()];
    let mut total = 0.0;
    for sl in &t.streamlines {
        for idx in visited_voxels(sl, grid) {
            counts[idx] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return None;
    }
    for c in counts.iter_mut() {
        *c /= total;
    }
    Some(counts)
}
