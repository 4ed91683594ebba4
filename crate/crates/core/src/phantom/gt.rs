use super::{PhantomDataset, PhantomError};
use crate::rng::Prng;
use crate::streamline::{add3, dot3, scale3, Streamline, Tractogram};

/// Radial clearance kept between ground-truth streamlines and the tube
/// boundary, in voxels. Half the voxel cube diagonal (~0.87) guarantees that
/// every visited voxel center stays within the analytic tube radius, so the
/// tractogram lies entirely inside the white-matter mask.
pub const GT_RADIAL_MARGIN: f64 = 0.9;

#[derive(Clone, Debug, Default)]
pub struct GtStats {
    pub requested_per_bundle: usize,
    pub accepted: Vec<usize>,
    pub discarded: Vec<usize>,
}

/// Integrates reference streamlines along each bundle's analytic orientation
/// field (midpoint rule, exact unit-step spacing) from jittered head-ROI
/// seeds until the tail ROI. Attempts that exhaust the step budget, leave
/// the safe tube, or start too far off-axis are discarded and retried.
pub fn generate_gt_tractogram(
    phantom: &mut PhantomDataset,
    step: f64,
    streamlines_per_bundle: usize,
    rng: &mut Prng,
) -> Result<GtStats, PhantomError> {
    assert!(step > 0.0, "step must be positive");
    let grid = phantom.grid;
    let mut streamlines = Vec::new();
    let mut labels = Vec::new();
    let mut stats = GtStats {
        requested_per_bundle: streamlines_per_bundle,
        accepted: vec![0; phantom.specs.len()],
        discarded: vec![0; phantom.specs.len()],
    };

    for b in 0..phantom.specs.len() {
        let line = &phantom.centerlines[b];
        let spec = &phantom.specs[b];
        let safe_radius = (spec.radius - GT_RADIAL_MARGIN).max(0.2 * spec.radius);
        // Seed only inside the tube portion of the head ROI.
        let head_voxels: Vec<usize> = (0..grid.num_voxels())
            .filter(|&v| phantom.head_rois[b][v] && phantom.bundle_masks[b][v])
            .collect();
        let budget = (4.0 * line.length() / step).ceil() as usize + 50;
        let max_attempts = streamlines_per_bundle * 20;

        let mut rng_b = rng.split(b as u64);
        let mut attempts = 0;
        while stats.accepted[b] < streamlines_per_bundle && attempts < max_attempts {
            attempts += 1;
            let vox = grid.voxel_at(head_voxels[rng_b.uniform_usize(head_voxels.len())]);
            let seed = [
                vox[0] as f64 + rng_b.uniform(),
                vox[1] as f64 + rng_b.uniform(),
                vox[2] as f64 + rng_b.uniform(),
            ];
            let (dist, _, mut dir) = line.nearest(seed);
            if dist > safe_radius {
                stats.discarded[b] += 1;
                continue;
            }

            let mut points = vec![seed];
            let mut p = seed;
            let mut ok = false;
            for _ in 0..budget {
                // Midpoint rule over the unit tangent field keeps |dp| = step.
                let (_, _, t1) = line.nearest(p);
                let t1 = align(t1, dir);
                let mid = add3(p, scale3(t1, 0.5 * step));
                let (_, _, t2) = line.nearest(mid);
                let t2 = align(t2, t1);
                p = add3(p, scale3(t2, step));
                dir = t2;
                points.push(p);

                let (radial, _, _) = line.nearest(p);
                if radial > safe_radius {
                    break; // drifted out of the safe tube
                }
                let Some(v) = grid.voxel_of(p) else { break };
                if phantom.tail_rois[b][grid.index(v)] {
                    ok = true;
                    break;
                }
            }
            if ok {
                streamlines.push(Streamline::new(points));
                labels.push(b);
                stats.accepted[b] += 1;
            } else {
                stats.discarded[b] += 1;
            }
        }
        if stats.accepted[b] < streamlines_per_bundle {
            return Err(PhantomError::TooFewStreamlines {
                name: phantom.specs[b].name.clone(),
                accepted: stats.accepted[b],
                requested: streamlines_per_bundle,
            });
        }
    }

    phantom.gt_tractogram = Tractogram::with_labels(streamlines, labels);
    Ok(stats)
}

fn align(t: [f64; 3], reference: [f64; 3]) -> [f64; 3] {
    if dot3(t, reference) < 0.0 {
        [-t[0], -t[1], -t[2]]
    } else {
        t
    }
}
