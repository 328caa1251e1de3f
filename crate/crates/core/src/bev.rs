//! BEV grid geometry, pillar aggregation, feature encoding, and warping.
//!
//! The base grid covers 281.6 m x 80 m centered on the ego vehicle. Pyramid
//! level `l` halves the base resolution `l + 1` times, so the desk preset
//! (0.8 m pillars, 100 x 352) yields level shapes 50x176, 25x88, 12x44 and
//! the full-size preset (0.4 m, 200 x 704) yields 100x352, 50x176, 25x88.
//! Feature maps are stored cell-major so one cell's channels form a
//! contiguous slice; empty cells stay exactly zero through every stage.

use indexmap::{IndexMap, IndexSet};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::{Pose2, Vec2};
use crate::linalg::Mat;
use crate::seeding::rng_from;
use crate::sensors::{PointSource, SensorCloud};

/// Number of pooled pillar statistics fed to the level-0 projection:
/// per sensor (LiDAR, radar) a count fraction, mean/min/max height, and
/// mean absolute Doppler (always zero in the LiDAR slot).
pub const STAT_DIMS: usize = 10;

/// Base-grid shape shared by every run at a given preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Base pillar edge length, meters.
    pub cell_m: f64,
    /// Base pillars along x (driving direction).
    pub width: usize,
    /// Base pillars along y.
    pub height: usize,
    /// Vertical acceptance band around the sensor plane; points with
    /// |z| > z_band_m / 2 never enter a pillar.
    pub z_band_m: f64,
    /// Pillar point capacity (first-come order; overflow is counted).
    pub n_max: u32,
}

impl GridSpec {
    /// Desk-scale preset: 0.8 m pillars, 100 x 352.
    pub fn desk() -> GridSpec {
        GridSpec { cell_m: 0.8, width: 352, height: 100, z_band_m: 4.0, n_max: 32 }
    }

    /// Full-resolution preset: 0.4 m pillars, 200 x 704.
    pub fn paper() -> GridSpec {
        GridSpec { cell_m: 0.4, width: 704, height: 200, z_band_m: 4.0, n_max: 32 }
    }

    pub fn extent_x_m(&self) -> f64 {
        self.cell_m * self.width as f64
    }

    pub fn extent_y_m(&self) -> f64 {
        self.cell_m * self.height as f64
    }

    /// Geometry of the raw pillar grid.
    pub fn base_geom(&self) -> LevelGeom {
        LevelGeom {
            width: self.width,
            height: self.height,
            cell_m: self.cell_m,
            x_min: -self.extent_x_m() / 2.0,
            y_min: -self.extent_y_m() / 2.0,
        }
    }

    /// Geometry of pyramid level `level`; dimensions floor-halve, so a
    /// trailing odd row or column is not represented at coarser levels.
    pub fn level_geom(&self, level: usize) -> LevelGeom {
        let shift = level + 1;
        LevelGeom {
            width: self.width >> shift,
            height: self.height >> shift,
            cell_m: self.cell_m * (1 << shift) as f64,
            x_min: -self.extent_x_m() / 2.0,
            y_min: -self.extent_y_m() / 2.0,
        }
    }
}

/// One grid level's shape and placement in the local (ego) frame.
/// Continuous cell coordinates put integers at cell centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGeom {
    pub width: usize,
    pub height: usize,
    pub cell_m: f64,
    pub x_min: f64,
    pub y_min: f64,
}

impl LevelGeom {
    /// Local point -> continuous cell coordinates.
    pub fn to_continuous(&self, p: Vec2) -> (f64, f64) {
        (
            (p.x - self.x_min) / self.cell_m - 0.5,
            (p.y - self.y_min) / self.cell_m - 0.5,
        )
    }

    /// Continuous cell coordinates -> local point.
    pub fn from_continuous(&self, u: f64, v: f64) -> Vec2 {
        Vec2::new(
            self.x_min + (u + 0.5) * self.cell_m,
            self.y_min + (v + 0.5) * self.cell_m,
        )
    }

    /// Integer cell containing a local point, if inside the grid.
    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let u = ((p.x - self.x_min) / self.cell_m).floor();
        let v = ((p.y - self.y_min) / self.cell_m).floor();
        if u >= 0.0 && v >= 0.0 && (u as usize) < self.width && (v as usize) < self.height {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, u: usize, v: usize) -> Vec2 {
        self.from_continuous(u as f64, v as f64)
    }

    pub fn contains_cell(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }
}

/// Dense scalar grid (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl BevGrid {
    pub fn new(width: usize, height: usize) -> BevGrid {
        BevGrid { width, height, data: vec![0.0; width * height] }
    }

    pub fn for_geom(geom: &LevelGeom) -> BevGrid {
        BevGrid::new(geom.width, geom.height)
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    /// Signed-index read; out-of-grid reads as zero.
    #[inline]
    pub fn get(&self, u: i64, v: i64) -> f64 {
        if u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height {
            self.data[v as usize * self.width + u as usize]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f64) {
        self.data[v * self.width + u] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_nonzero(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != 0.0)
            .map(move |(i, &x)| (i % w, i / w, x))
    }
}

/// Dense multi-channel map, cell-major: `cell(u, v)` is a contiguous
/// `channels`-long slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, width: usize, height: usize) -> FeatureMap {
        FeatureMap { channels, width, height, data: vec![0.0; channels * width * height] }
    }

    pub fn for_geom(channels: usize, geom: &LevelGeom) -> FeatureMap {
        FeatureMap::zeros(channels, geom.width, geom.height)
    }

    #[inline]
    fn base(&self, u: usize, v: usize) -> usize {
        (v * self.width + u) * self.channels
    }

    #[inline]
    pub fn cell(&self, u: usize, v: usize) -> &[f64] {
        let b = self.base(u, v);
        &self.data[b..b + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let b = self.base(u, v);
        &mut self.data[b..b + self.channels]
    }

    pub fn occupied(&self, u: usize, v: usize) -> bool {
        self.cell(u, v).iter().any(|&x| x != 0.0)
    }

    /// Cells with any nonzero channel, in row-major order.
    pub fn nonzero_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for v in 0..self.height {
            for u in 0..self.width {
                if self.occupied(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn nonzero_value_count(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// One feature map per pyramid level, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn zeros(channels: &[usize], spec: &GridSpec) -> FeaturePyramid {
        let levels = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| FeatureMap::for_geom(c, &spec.level_geom(l)))
            .collect();
        FeaturePyramid { levels }
    }
}

/// Points retained by one pillar, split by sensor. Radar height and Doppler
/// vectors stay index-aligned.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PillarPoints {
    pub lidar_z: Vec<f64>,
    pub radar_z: Vec<f64>,
    pub radar_doppler: Vec<f64>,
    /// Points that arrived after the pillar hit capacity.
    pub dropped: u32,
}

impl PillarPoints {
    pub fn stored(&self) -> usize {
        self.lidar_z.len() + self.radar_z.len()
    }

    /// Raw hit count including capacity overflow; drives the density scale.
    pub fn total_seen(&self) -> u64 {
        self.stored() as u64 + self.dropped as u64
    }

    /// Pooled statistics for the feature encoder. Slot 4 (LiDAR Doppler) is
    /// structurally zero.
    pub fn stat_vector(&self, n_max: u32) -> [f64; STAT_DIMS] {
        fn summarize(zs: &[f64]) -> (f64, f64, f64) {
            let mut sum = 0.0;
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for &z in zs {
                sum += z;
                min = min.min(z);
                max = max.max(z);
            }
            (sum / zs.len() as f64, min, max)
        }
        let mut s = [0.0; STAT_DIMS];
        if !self.lidar_z.is_empty() {
            let (mean, min, max) = summarize(&self.lidar_z);
            s[0] = self.lidar_z.len() as f64 / n_max as f64;
            s[1] = mean;
            s[2] = min;
            s[3] = max;
        }
        if !self.radar_z.is_empty() {
            let (mean, min, max) = summarize(&self.radar_z);
            s[5] = self.radar_z.len() as f64 / n_max as f64;
            s[6] = mean;
            s[7] = min;
            s[8] = max;
            s[9] = self.radar_doppler.iter().map(|d| d.abs()).sum::<f64>()
                / self.radar_doppler.len() as f64;
        }
        s
    }
}

/// Sparse pillar table over the base grid. Iteration order is point-arrival
/// order, which keeps downstream float summation deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PillarStats {
    pub cells: IndexMap<(u16, u16), PillarPoints>,
    /// Points outside the grid extent or the vertical band.
    pub skipped: u64,
}

/// Bins a sensor cloud (already in the ego frame) into base-grid pillars.
pub fn pillarize(cloud: &SensorCloud, spec: &GridSpec) -> PillarStats {
    let geom = spec.base_geom();
    let mut stats = PillarStats::default();
    for p in &cloud.points {
        if p.z.abs() > spec.z_band_m / 2.0 {
            stats.skipped += 1;
            continue;
        }
        let Some((u, v)) = geom.cell_of(p.position) else {
            stats.skipped += 1;
            continue;
        };
        let cell = stats.cells.entry((u as u16, v as u16)).or_default();
        if cell.stored() >= spec.n_max as usize {
            cell.dropped += 1;
            continue;
        }
        match p.source {
            PointSource::Lidar => cell.lidar_z.push(p.z),
            PointSource::Radar { .. } => {
                cell.radar_z.push(p.z);
                cell.radar_doppler.push(p.doppler.unwrap_or(0.0));
            }
        }
    }
    stats
}

/// One sparse projection row: a level-0 output channel reads three of the
/// ten pooled statistics.
#[derive(Debug, Clone)]
pub struct SparseProj {
    pub dims: [usize; 3],
    pub weights: [f64; 3],
}

/// Frozen encoder weights; build once per run from the model seed.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub base_proj: Vec<SparseProj>,
    /// Dense per-cell channel projections for levels 1 and 2.
    pub level_proj: [Mat; 2],
}

impl EncoderParams {
    pub fn seeded(channels: &[usize; 3], seed: u64) -> EncoderParams {
        let mut rng = rng_from(seed);
        let scale = (2.0 / (STAT_DIMS + channels[0]) as f64).sqrt();
        let mut base_proj = Vec::with_capacity(channels[0]);
        for _ in 0..channels[0] {
            let mut dims = [0usize; 3];
            let mut k = 0;
            while k < 3 {
                let d = rng.gen_range(0..STAT_DIMS);
                if !dims[..k].contains(&d) {
                    dims[k] = d;
                    k += 1;
                }
            }
            let mut weights = [0.0; 3];
            for w in &mut weights {
                *w = rng.sample::<f64, _>(StandardNormal) * scale;
            }
            base_proj.push(SparseProj { dims, weights });
        }
        let level_proj = [
            Mat::xavier(&mut rng, channels[1], channels[0]),
            Mat::xavier(&mut rng, channels[2], channels[1]),
        ];
        EncoderParams { base_proj, level_proj }
    }
}

/// Encodes pillar statistics into the three-level feature pyramid. Only
/// cells reachable from occupied pillars are touched, so empty space is
/// exactly zero at every level.
pub fn encode_features(
    stats: &PillarStats,
    spec: &GridSpec,
    channels: &[usize; 3],
    params: &EncoderParams,
) -> FeaturePyramid {
    assert_eq!(params.base_proj.len(), channels[0], "encoder built for different widths");
    let mut pyramid = FeaturePyramid::zeros(channels, spec);

    // Base pillars average-pool 2x2 onto the finest level.
    let geom0 = spec.level_geom(0);
    let mut pooled: IndexMap<(usize, usize), [f64; STAT_DIMS]> = IndexMap::new();
    for (&(u, v), cell) in &stats.cells {
        let (u0, v0) = (u as usize / 2, v as usize / 2);
        if u0 >= geom0.width || v0 >= geom0.height {
            continue;
        }
        let sv = cell.stat_vector(spec.n_max);
        let acc = pooled.entry((u0, v0)).or_insert([0.0; STAT_DIMS]);
        for (a, s) in acc.iter_mut().zip(sv.iter()) {
            *a += s / 4.0;
        }
    }
    for (&(u, v), sv) in &pooled {
        let out = pyramid.levels[0].cell_mut(u, v);
        for (c, proj) in params.base_proj.iter().enumerate() {
            out[c] = proj
                .dims
                .iter()
                .zip(proj.weights.iter())
                .map(|(&d, &w)| w * sv[d])
                .sum();
        }
    }

    // Deeper levels: 2x2 average pool, then a dense channel projection.
    let mut occupied: IndexSet<(usize, usize)> = pooled.keys().copied().collect();
    for l in 1..3 {
        let geom = spec.level_geom(l);
        let mut next_occupied: IndexSet<(usize, usize)> = IndexSet::new();
        for &(u, v) in &occupied {
            let (uc, vc) = (u / 2, v / 2);
            if uc < geom.width && vc < geom.height {
                next_occupied.insert((uc, vc));
            }
        }
        let (prev, rest) = pyramid.levels.split_at_mut(l);
        let src = &prev[l - 1];
        let dst = &mut rest[0];
        let mut buf = vec![0.0; channels[l - 1]];
        for &(u, v) in &next_occupied {
            buf.iter_mut().for_each(|x| *x = 0.0);
            for dv in 0..2 {
                for du in 0..2 {
                    let (su, sv) = (u * 2 + du, v * 2 + dv);
                    if su < src.width && sv < src.height {
                        for (b, x) in buf.iter_mut().zip(src.cell(su, sv)) {
                            *b += x / 4.0;
                        }
                    }
                }
            }
            params.level_proj[l - 1].matvec_into(&buf, dst.cell_mut(u, v));
        }
        occupied = next_occupied;
    }
    pyramid
}

/// Interpolation mode for warps and samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
}

/// Samples one scalar grid at continuous cell coordinates; out-of-grid taps
/// contribute zero.
pub fn sample_grid(grid: &BevGrid, u: f64, v: f64, interp: Interp) -> f64 {
    match interp {
        Interp::Nearest => grid.get(u.round() as i64, v.round() as i64),
        Interp::Bilinear => {
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let (u0, v0) = (u0 as i64, v0 as i64);
            grid.get(u0, v0) * (1.0 - fu) * (1.0 - fv)
                + grid.get(u0 + 1, v0) * fu * (1.0 - fv)
                + grid.get(u0, v0 + 1) * (1.0 - fu) * fv
                + grid.get(u0 + 1, v0 + 1) * fu * fv
        }
    }
}

/// Samples every channel of a feature map at continuous cell coordinates,
/// adding `scale` times the result into `out`.
pub fn sample_map_into(map: &FeatureMap, u: f64, v: f64, interp: Interp, scale: f64, out: &mut [f64]) {
    assert_eq!(out.len(), map.channels);
    let mut tap = |ui: i64, vi: i64, w: f64| {
        if w != 0.0 && ui >= 0 && vi >= 0 && (ui as usize) < map.width && (vi as usize) < map.height
        {
            let cell = map.cell(ui as usize, vi as usize);
            for (o, x) in out.iter_mut().zip(cell) {
                *o += scale * w * x;
            }
        }
    };
    match interp {
        Interp::Nearest => tap(u.round() as i64, v.round() as i64, 1.0),
        Interp::Bilinear => {
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let (u0, v0) = (u0 as i64, v0 as i64);
            tap(u0, v0, (1.0 - fu) * (1.0 - fv));
            tap(u0 + 1, v0, fu * (1.0 - fv));
            tap(u0, v0 + 1, (1.0 - fu) * fv);
            tap(u0 + 1, v0 + 1, fu * fv);
        }
    }
}

/// Destination cells that can sample nonzero source content: forward-map
/// every occupied source cell and take a neighborhood wide enough to cover
/// the backward interpolation support.
fn warp_candidates(
    occupied: impl Iterator<Item = (usize, usize)>,
    geom: &LevelGeom,
    src_pose: Pose2,
    dst_pose: Pose2,
    interp: Interp,
) -> IndexSet<(usize, usize)> {
    let radius: i64 = match interp {
        Interp::Nearest => 1,
        Interp::Bilinear => 2,
    };
    let mut out = IndexSet::new();
    for (u, v) in occupied {
        let world = src_pose.to_world(geom.cell_center(u, v));
        let (ud, vd) = geom.to_continuous(dst_pose.to_local(world));
        let (uc, vc) = (ud.round() as i64, vd.round() as i64);
        for dv in -radius..=radius {
            for du in -radius..=radius {
                if geom.contains_cell(uc + du, vc + dv) {
                    out.insert(((uc + du) as usize, (vc + dv) as usize));
                }
            }
        }
    }
    out
}

/// Resamples a feature map from one agent's frame into another's. The
/// output at destination cell center `x` is the source sampled at the same
/// world point; content leaving the grid is lost, uncovered cells are zero.
pub fn warp_feature_map(
    src: &FeatureMap,
    geom: &LevelGeom,
    src_pose: Pose2,
    dst_pose: Pose2,
    interp: Interp,
) -> FeatureMap {
    let mut dst = FeatureMap::zeros(src.channels, src.width, src.height);
    let candidates =
        warp_candidates(src.nonzero_cells().into_iter(), geom, src_pose, dst_pose, interp);
    for (u, v) in candidates {
        let world = dst_pose.to_world(geom.cell_center(u, v));
        let (us, vs) = geom.to_continuous(src_pose.to_local(world));
        sample_map_into(src, us, vs, interp, 1.0, dst.cell_mut(u, v));
    }
    dst
}

/// Scalar-grid counterpart of [`warp_feature_map`].
pub fn warp_grid(
    src: &BevGrid,
    geom: &LevelGeom,
    src_pose: Pose2,
    dst_pose: Pose2,
    interp: Interp,
) -> BevGrid {
    let mut dst = BevGrid::new(src.width, src.height);
    let candidates = warp_candidates(
        src.iter_nonzero().map(|(u, v, _)| (u, v)),
        geom,
        src_pose,
        dst_pose,
        interp,
    );
    for (u, v) in candidates {
        let world = dst_pose.to_world(geom.cell_center(u, v));
        let (us, vs) = geom.to_continuous(src_pose.to_local(world));
        dst.set(u, v, sample_grid(src, us, vs, interp));
    }
    dst
}

/// Max-pools by an integer factor; output dimensions floor-divide, dropping
/// any remainder rows or columns.
pub fn pool_max(grid: &BevGrid, factor: usize) -> BevGrid {
    assert!(factor >= 1);
    let mut out = BevGrid::new(grid.width / factor, grid.height / factor);
    for v in 0..out.height {
        for u in 0..out.width {
            let mut m = f64::NEG_INFINITY;
            for dv in 0..factor {
                for du in 0..factor {
                    m = m.max(grid.at(u * factor + du, v * factor + dv));
                }
            }
            out.set(u, v, m);
        }
    }
    out
}

/// Average-pools by an integer factor (floor dimensions, as [`pool_max`]).
pub fn pool_avg(grid: &BevGrid, factor: usize) -> BevGrid {
    assert!(factor >= 1);
    let mut out = BevGrid::new(grid.width / factor, grid.height / factor);
    let denom = (factor * factor) as f64;
    for v in 0..out.height {
        for u in 0..out.width {
            let mut s = 0.0;
            for dv in 0..factor {
                for du in 0..factor {
                    s += grid.at(u * factor + du, v * factor + dv);
                }
            }
            out.set(u, v, s / denom);
        }
    }
    out
}
