//! Semantic priors: dynamic map, confidence map, foreground density map.
//!
//! Radar Doppler is ego-motion compensated per point; a cell turns dynamic
//! when any compensated radial speed passes the threshold strictly. The
//! confidence map is a blurred occupancy of visible returns (a deterministic
//! stand-in for a learned foreground head). Foreground masking applies the
//! height-band rules per sensor and unions the results, and the density map
//! is the mask scaled by normalized pillar counts.

use crate::bev::{pool_avg, pool_max, BevGrid, GridSpec, PillarStats};
use crate::config::PriorsConfig;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::sensors::{radar_unit_vector, rotate_ego_velocity, PointSource, RadarMount, SensorCloud};

/// Compensated radial velocities, index-aligned with the cloud. `None`
/// marks non-radar points and degenerate geometry.
#[derive(Debug, Clone, Default)]
pub struct RadialVelocities {
    pub per_point: Vec<Option<f64>>,
    /// Radar points whose position coincides with the mount origin.
    pub skipped: u64,
}

/// Removes the ego-motion component from every radar Doppler value:
/// `v_radial = doppler + (R_k v_veh) . u`. Uses the same unit-vector and
/// rotation arithmetic as the scan itself, so a static target cancels to
/// exactly zero.
pub fn compensate_doppler(
    cloud: &SensorCloud,
    v_veh: Vec2,
    mounts: &[RadarMount],
) -> RadialVelocities {
    let mut out = RadialVelocities::default();
    out.per_point.reserve(cloud.points.len());
    for p in &cloud.points {
        let radial = match p.source {
            PointSource::Lidar => None,
            PointSource::Radar { mount } => {
                let Some(mount) = mounts.iter().find(|m| m.index == mount) else {
                    out.skipped += 1;
                    out.per_point.push(None);
                    continue;
                };
                match radar_unit_vector(p.position, mount) {
                    Some(u) => {
                        let doppler = p.doppler.unwrap_or(0.0);
                        Some(doppler + rotate_ego_velocity(v_veh, mount).dot(u))
                    }
                    None => {
                        out.skipped += 1;
                        None
                    }
                }
            }
        };
        out.per_point.push(radial);
    }
    out
}

/// Binary map: 1 where any in-band radar point's compensated radial speed
/// strictly exceeds `v_th`.
pub fn dynamic_map(
    cloud: &SensorCloud,
    radial: &RadialVelocities,
    spec: &GridSpec,
    v_th: f64,
) -> BevGrid {
    assert_eq!(cloud.points.len(), radial.per_point.len(), "radial velocities misaligned");
    let geom = spec.base_geom();
    let mut map = BevGrid::for_geom(&geom);
    for (p, r) in cloud.points.iter().zip(&radial.per_point) {
        let Some(r) = r else { continue };
        if r.abs() <= v_th || p.z.abs() > spec.z_band_m / 2.0 {
            continue;
        }
        if let Some((u, v)) = geom.cell_of(p.position) {
            map.set(u, v, 1.0);
        }
    }
    map
}

/// Height-band foreground rule for one sensor's points in one cell:
/// foreground iff the cell has at least one point, none above `t_max`
/// (rule i, checked first), and at least one inside `[t_lower, t_upper]`.
pub fn height_rule(zs: &[f64], t_lower: f64, t_upper: f64, t_max: f64) -> bool {
    if zs.is_empty() || zs.iter().any(|&z| z > t_max) {
        return false;
    }
    zs.iter().any(|&z| z >= t_lower && z <= t_upper)
}

/// Foreground mask: the height rule evaluated per sensor, then unioned.
pub fn foreground_mask(stats: &PillarStats, spec: &GridSpec, cfg: &PriorsConfig) -> BevGrid {
    let mut map = BevGrid::new(spec.width, spec.height);
    for (&(u, v), cell) in &stats.cells {
        let fg = height_rule(&cell.lidar_z, cfg.t_lower, cfg.t_upper, cfg.t_max)
            || height_rule(&cell.radar_z, cfg.t_lower, cfg.t_upper, cfg.t_max);
        if fg {
            map.set(u as usize, v as usize, 1.0);
        }
    }
    map
}

/// Per-cell raw hit counts (capacity overflow included).
pub fn counts_grid(stats: &PillarStats, spec: &GridSpec) -> BevGrid {
    let mut map = BevGrid::new(spec.width, spec.height);
    for (&(u, v), cell) in &stats.cells {
        map.set(u as usize, v as usize, cell.total_seen() as f64);
    }
    map
}

/// Density scale: counts normalized by pillar capacity, clamped to [0, 1].
pub fn density_scale(counts: &BevGrid, n_max: u32) -> BevGrid {
    let mut out = counts.clone();
    for x in out.values_mut() {
        *x = (*x / n_max as f64).clamp(0.0, 1.0);
    }
    out
}

/// Foreground density map `V = FG .* DS`.
pub fn foreground_density_map(fg: &BevGrid, ds: &BevGrid) -> Result<BevGrid> {
    if fg.width != ds.width || fg.height != ds.height {
        return Err(Error::ShapeMismatch(format!(
            "foreground {}x{} vs density {}x{}",
            fg.width, fg.height, ds.width, ds.height
        )));
    }
    let mut out = fg.clone();
    for (x, &d) in out.values_mut().iter_mut().zip(ds.values()) {
        *x *= d;
    }
    Ok(out)
}

/// Separable Gaussian blur with a 3-sigma truncated, sum-normalized kernel.
pub fn gaussian_blur(grid: &BevGrid, sigma_cells: f64) -> BevGrid {
    if sigma_cells <= 0.0 {
        return grid.clone();
    }
    let radius = (3.0 * sigma_cells).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma_cells * sigma_cells)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let mut horiz = BevGrid::new(grid.width, grid.height);
    for v in 0..grid.height {
        for u in 0..grid.width {
            let mut s = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                s += k * grid.get(u as i64 + j as i64 - radius, v as i64);
            }
            horiz.set(u, v, s);
        }
    }
    let mut out = BevGrid::new(grid.width, grid.height);
    for v in 0..grid.height {
        for u in 0..grid.width {
            let mut s = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                s += k * horiz.get(u as i64, v as i64 + j as i64 - radius);
            }
            out.set(u, v, s);
        }
    }
    out
}

/// Confidence surrogate: occupancy of cells holding any return, blurred and
/// clamped to [0, 1]. Returns only exist for visible surfaces, so occluded
/// objects contribute nothing.
pub fn confidence_map(stats: &PillarStats, spec: &GridSpec, blur_sigma_cells: f64) -> BevGrid {
    let mut occ = BevGrid::new(spec.width, spec.height);
    for &(u, v) in stats.cells.keys() {
        occ.set(u as usize, v as usize, 1.0);
    }
    let mut out = gaussian_blur(&occ, blur_sigma_cells);
    for x in out.values_mut() {
        *x = x.clamp(0.0, 1.0);
    }
    out
}

/// All priors for one agent and frame, at base resolution and per pyramid
/// level. Dynamic downsamples by block max (a coarse cell is dynamic if any
/// covered fine cell is); confidence and density downsample by block mean.
#[derive(Debug, Clone)]
pub struct PriorMaps {
    pub dynamic: BevGrid,
    pub confidence: BevGrid,
    pub density: BevGrid,
    pub dynamic_levels: Vec<BevGrid>,
    pub confidence_levels: Vec<BevGrid>,
    pub density_levels: Vec<BevGrid>,
    /// Radar points skipped during Doppler compensation.
    pub skipped_doppler: u64,
}

/// Computes every prior for one agent's merged cloud.
pub fn build_priors(
    cloud: &SensorCloud,
    stats: &PillarStats,
    v_veh: Vec2,
    mounts: &[RadarMount],
    spec: &GridSpec,
    cfg: &PriorsConfig,
    levels: usize,
) -> Result<PriorMaps> {
    let radial = compensate_doppler(cloud, v_veh, mounts);
    let dynamic = dynamic_map(cloud, &radial, spec, cfg.v_th);
    let confidence = confidence_map(stats, spec, cfg.blur_sigma_cells);
    let fg = foreground_mask(stats, spec, cfg);
    let ds = density_scale(&counts_grid(stats, spec), spec.n_max);
    let density = foreground_density_map(&fg, &ds)?;

    let factors: Vec<usize> = (0..levels).map(|l| 1 << (l + 1)).collect();
    Ok(PriorMaps {
        dynamic_levels: factors.iter().map(|&f| pool_max(&dynamic, f)).collect(),
        confidence_levels: factors.iter().map(|&f| pool_avg(&confidence, f)).collect(),
        density_levels: factors.iter().map(|&f| pool_avg(&density, f)).collect(),
        dynamic,
        confidence,
        density,
        skipped_doppler: radial.skipped,
    })
}
