//! Cell-level coverage of ground-truth vehicles, the desk-scale stand-in
//! for detection quality: a trained detector is out of scope, so we ask
//! how much of each vehicle's footprint the fused output actually touches.

use indexmap::IndexSet;

use crate::bev::{FeatureMap, GridSpec};
use crate::querygen::QuerySet;
use crate::scene::{line_of_sight, Scene};

/// Coverage of one frame, split by whether the ego could see the cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoverageFrame {
    /// Fraction of visible ground-truth cells covered; 0 when none exist.
    pub visible_fraction: f64,
    /// Fraction of occluded ground-truth cells covered; 0 when none exist.
    pub occluded_fraction: f64,
    pub visible_cells: usize,
    pub occluded_cells: usize,
    pub covered_visible: usize,
    pub covered_occluded: usize,
}

/// Cells the fused output "touches": non-zero cells of the aggregated map
/// plus every fine sampling location, mapped onto the finest lattice.
fn covered_cells(aggregated: &FeatureMap, queries: Option<&QuerySet>) -> IndexSet<(i64, i64)> {
    let mut covered: IndexSet<(i64, i64)> = aggregated
        .nonzero_cells()
        .into_iter()
        .map(|(u, v)| (u as i64, v as i64))
        .collect();
    if let Some(qs) = queries {
        for scale in &qs.scales {
            let factor = (1usize << scale.level) as f64;
            // A coarse cell u spans fine cells [u*f, (u+1)*f); its centre
            // in fine continuous coordinates is u*f + (f-1)/2.
            let offset = (factor - 1.0) / 2.0;
            for fine in &scale.fine {
                for &(u, v) in fine {
                    covered.insert((
                        (u * factor + offset).round() as i64,
                        (v * factor + offset).round() as i64,
                    ));
                }
            }
        }
    }
    covered
}

/// Scores the fused output of `ego_index`'s agent against the true scene.
/// Ground truth is every other vehicle's footprint rasterised onto the
/// finest ego-frame lattice (true pose, noise never shifts the report). A
/// cell counts as covered when the fused output touches anything within
/// one cell of it (Chebyshev distance ≤ 1); it counts as visible when the
/// sensing oracle has an unobstructed line to its centre within LiDAR
/// range.
pub fn coverage_frame(
    scene: &Scene,
    ego_index: usize,
    spec: &GridSpec,
    lidar_range_m: f64,
    aggregated: &FeatureMap,
    queries: Option<&QuerySet>,
) -> CoverageFrame {
    let geom = spec.level_geom(0);
    let covered = covered_cells(aggregated, queries);
    let ego = &scene.vehicles[ego_index];
    let ego_pose = ego.pose();

    let mut report = CoverageFrame::default();
    for (k, vehicle) in scene.vehicles.iter().enumerate() {
        if k == ego_index {
            continue;
        }
        let footprint = vehicle.footprint();
        // Bounding range of candidate cells in the ego frame.
        let mut u_min = f64::INFINITY;
        let mut u_max = f64::NEG_INFINITY;
        let mut v_min = f64::INFINITY;
        let mut v_max = f64::NEG_INFINITY;
        for corner in footprint.corners() {
            let (u, v) = geom.to_continuous(ego_pose.to_local(corner));
            u_min = u_min.min(u);
            u_max = u_max.max(u);
            v_min = v_min.min(v);
            v_max = v_max.max(v);
        }
        let u_lo = (u_min.floor().max(0.0)) as i64;
        let v_lo = (v_min.floor().max(0.0)) as i64;
        let u_hi = (u_max.ceil() as i64).min(geom.width as i64 - 1);
        let v_hi = (v_max.ceil() as i64).min(geom.height as i64 - 1);

        for v in v_lo..=v_hi {
            for u in u_lo..=u_hi {
                let world = ego_pose.to_world(geom.cell_center(u as usize, v as usize));
                if !footprint.contains(world) {
                    continue;
                }
                let visible = (world - ego.position).norm() <= lidar_range_m
                    && line_of_sight(scene, ego.position, world, &[ego.id, vehicle.id]);
                let is_covered = (-1..=1).any(|dv| {
                    (-1..=1).any(|du| covered.contains(&(u + du, v + dv)))
                });
                if visible {
                    report.visible_cells += 1;
                    report.covered_visible += usize::from(is_covered);
                } else {
                    report.occluded_cells += 1;
                    report.covered_occluded += usize::from(is_covered);
                }
            }
        }
    }
    if report.visible_cells > 0 {
        report.visible_fraction = report.covered_visible as f64 / report.visible_cells as f64;
    }
    if report.occluded_cells > 0 {
        report.occluded_fraction = report.covered_occluded as f64 / report.occluded_cells as f64;
    }
    report
}
