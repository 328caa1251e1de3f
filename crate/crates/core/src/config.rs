//! Scenario configuration: JSON-backed description of a run.
//!
//! One file describes the scene (counts or exact placements, obstacles,
//! speeds, frame cadence), the sensor rig, the BEV grid and feature pyramid
//! shapes, and the prior / query-generation knobs. Every field has a
//! default, so `{}` is a valid scenario.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::GridSpec;
use crate::error::{Error, Result};
use crate::sensors::{LidarSpec, RadarMount};

/// Default channel widths per pyramid level for desk-scale runs.
pub const SMALL_CHANNELS: [usize; 3] = [8, 16, 32];
/// Full-size channel widths per pyramid level.
pub const FULL_CHANNELS: [usize; 3] = [128, 256, 512];

/// Top-level scenario description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Randomly spawned vehicles, in addition to `placements`.
    #[serde(default)]
    pub vehicles: u32,
    /// Number of connected agents. With explicit agent-flagged placements
    /// this must match the flag count; otherwise the first `agents`
    /// vehicles are connected.
    #[serde(default = "default_agents")]
    pub agents: u32,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    /// Speed magnitude range for randomly spawned vehicles, m/s.
    #[serde(default = "default_speed_range")]
    pub speed_range_mps: [f64; 2],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub frames: u32,
    /// Frame period in seconds (default 10 Hz).
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Half-extent of the random spawn area (x, y) in meters.
    #[serde(default = "default_spawn_area")]
    pub spawn_area: [f64; 2],
    /// Exact vehicle placements; listed before random spawns.
    #[serde(default)]
    pub placements: Vec<PlacementSpec>,
    #[serde(default)]
    pub rig: RigConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub pyramid: PyramidConfig,
    #[serde(default)]
    pub priors: PriorsConfig,
    #[serde(default)]
    pub querygen: QueryGenConfig,
}

fn default_agents() -> u32 {
    2
}
fn default_speed_range() -> [f64; 2] {
    [0.0, 12.0]
}
fn default_frames() -> u32 {
    10
}
fn default_dt() -> f64 {
    0.1
}
fn default_spawn_area() -> [f64; 2] {
    [60.0, 30.0]
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty scenario config")
    }
}

/// Fixed vehicle placement.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementSpec {
    pub position: [f64; 2],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default = "default_len")]
    pub length: f64,
    #[serde(default = "default_wid")]
    pub width: f64,
    /// Body height band in world meters (ground = 0).
    #[serde(default = "default_zb")]
    pub z_base: f64,
    #[serde(default = "default_zt")]
    pub z_top: f64,
    #[serde(default)]
    pub agent: bool,
}

fn default_len() -> f64 {
    4.5
}
fn default_wid() -> f64 {
    2.0
}
fn default_zb() -> f64 {
    0.4
}
fn default_zt() -> f64 {
    1.6
}

/// Static box obstacle. Tall defaults make obstacles read as background in
/// the height-band foreground rule; lower `z_top` for in-band occluders.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center: [f64; 2],
    #[serde(default)]
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    #[serde(default)]
    pub z_base: f64,
    #[serde(default = "default_obstacle_top")]
    pub z_top: f64,
}

fn default_obstacle_top() -> f64 {
    4.0
}

/// Sensor rig: radar mounts plus one planar LiDAR.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigConfig {
    #[serde(default = "RadarMount::default_rig")]
    pub radars: Vec<RadarMount>,
    #[serde(default)]
    pub lidar: LidarSpec,
    /// Sensor height above ground; point z values are reported relative to
    /// this height.
    #[serde(default = "default_sensor_height")]
    pub sensor_height: f64,
}

fn default_sensor_height() -> f64 {
    1.7
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            radars: RadarMount::default_rig(),
            lidar: LidarSpec::default(),
            sensor_height: default_sensor_height(),
        }
    }
}

/// BEV grid preset selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    /// 100 x 352 pillars, 0.8 m cells over the full extent.
    Desk,
    /// 200 x 704 pillars, 0.4 m cells.
    Paper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_grid_preset")]
    pub preset: GridPreset,
}

fn default_grid_preset() -> GridPreset {
    GridPreset::Desk
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { preset: GridPreset::Desk }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    /// Per-level channel widths; each level must double the previous.
    #[serde(default = "default_channels")]
    pub channels: [usize; 3],
}

fn default_channels() -> [usize; 3] {
    SMALL_CHANNELS
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig { channels: SMALL_CHANNELS }
    }
}

/// Thresholds for the motion / foreground / confidence priors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorsConfig {
    /// Compensated radial-speed threshold for the dynamic map, m/s.
    #[serde(default = "default_v_th")]
    pub v_th: f64,
    /// Lower bound of the in-band height window, sensor-relative meters.
    #[serde(default = "default_t_lower")]
    pub t_lower: f64,
    /// Upper bound of the in-band height window.
    #[serde(default = "default_t_upper")]
    pub t_upper: f64,
    /// Any point above this height marks its cell background.
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    /// Confidence-map Gaussian blur radius, in cells.
    #[serde(default = "default_blur")]
    pub blur_sigma_cells: f64,
}

fn default_v_th() -> f64 {
    1.0
}
fn default_t_lower() -> f64 {
    -1.2
}
fn default_t_upper() -> f64 {
    0.0
}
fn default_t_max() -> f64 {
    1.0
}
fn default_blur() -> f64 {
    1.0
}

impl Default for PriorsConfig {
    fn default() -> Self {
        PriorsConfig {
            v_th: default_v_th(),
            t_lower: default_t_lower(),
            t_upper: default_t_upper(),
            t_max: default_t_max(),
            blur_sigma_cells: default_blur(),
        }
    }
}

/// Query-generation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryGenConfig {
    /// Reference points per branch, per scale.
    #[serde(default = "default_budgets")]
    pub budgets: [usize; 3],
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Quantile of positive confidence values a local max must clear to
    /// count as an occluder centroid.
    #[serde(default = "default_percentile")]
    pub occluder_percentile: f64,
    /// Shadow-offset distribution at the finest scale; halved per level.
    #[serde(default)]
    pub shadow: ShadowConfig,
    /// Transmit halos around every fine sampling location instead of each
    /// nudged anchor (comparison mode; much larger payload).
    #[serde(default)]
    pub halo_per_fine_point: bool,
}

fn default_budgets() -> [usize; 3] {
    [200, 100, 50]
}
fn default_heads() -> usize {
    4
}
fn default_percentile() -> f64 {
    0.5
}

impl Default for QueryGenConfig {
    fn default() -> Self {
        QueryGenConfig {
            budgets: default_budgets(),
            heads: default_heads(),
            occluder_percentile: default_percentile(),
            shadow: ShadowConfig::default(),
            halo_per_fine_point: false,
        }
    }
}

/// Along-ray and lateral shadow sampling parameters, in finest-scale cells.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadowConfig {
    #[serde(default = "default_r_min")]
    pub r_min: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    #[serde(default = "default_sigma_lat")]
    pub sigma_lat: f64,
}

fn default_r_min() -> f64 {
    2.0
}
fn default_r_max() -> f64 {
    8.0
}
fn default_sigma_lat() -> f64 {
    1.5
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig {
            r_min: default_r_min(),
            r_max: default_r_max(),
            sigma_lat: default_sigma_lat(),
        }
    }
}

impl ScenarioConfig {
    /// Loads and validates a scenario JSON file.
    pub fn from_path(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ScenarioConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Grid for this run; `paper_shapes` forces the full-resolution preset.
    pub fn grid_spec(&self, paper_shapes: bool) -> GridSpec {
        match (paper_shapes, self.grid.preset) {
            (true, _) | (false, GridPreset::Paper) => GridSpec::paper(),
            (false, GridPreset::Desk) => GridSpec::desk(),
        }
    }

    /// Channel widths for this run; `paper_shapes` forces the full widths.
    pub fn channels(&self, paper_shapes: bool) -> [usize; 3] {
        if paper_shapes {
            FULL_CHANNELS
        } else {
            self.pyramid.channels
        }
    }

    /// Extra random spawns needed to host agents: when no placement carries
    /// the agent flag, the first `agents` vehicles are the agents, and any
    /// not covered by placements are spawned beyond `vehicles`.
    pub fn agent_shortfall(&self) -> usize {
        if self.placements.iter().any(|p| p.agent) {
            0
        } else {
            (self.agents as usize).saturating_sub(self.placements.len())
        }
    }

    /// Total vehicle count (placements, random spawns, agent hosts).
    pub fn total_vehicles(&self) -> usize {
        self.placements.len() + self.vehicles as usize + self.agent_shortfall()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dt <= 0.0 || !self.dt.is_finite() {
            return fail(format!("dt must be positive, got {}", self.dt));
        }
        if self.frames == 0 {
            return fail("frames must be >= 1".into());
        }
        let [lo, hi] = self.speed_range_mps;
        if !(lo >= 0.0 && hi >= lo) {
            return fail(format!("speed_range_mps must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"));
        }
        let flagged = self.placements.iter().filter(|p| p.agent).count() as u32;
        if flagged > 0 && flagged != self.agents {
            return fail(format!(
                "agents = {} but {flagged} placements carry the agent flag",
                self.agents
            ));
        }
        if self.agents == 0 {
            return fail("at least one agent is required".into());
        }
        let ch = self.pyramid.channels;
        if ch[1] != 2 * ch[0] || ch[2] != 2 * ch[1] || ch[0] == 0 {
            return fail(format!("pyramid channels must double per level, got {ch:?}"));
        }
        if ch[0] % self.querygen.heads != 0 {
            return fail(format!(
                "level-0 channels {} must be divisible by heads {}",
                ch[0], self.querygen.heads
            ));
        }
        let p = &self.priors;
        if !(p.t_lower < p.t_upper && p.t_upper <= p.t_max) {
            return fail(format!(
                "height thresholds must satisfy t_lower < t_upper <= t_max, got {} {} {}",
                p.t_lower, p.t_upper, p.t_max
            ));
        }
        if p.v_th < 0.0 {
            return fail(format!("v_th must be non-negative, got {}", p.v_th));
        }
        let q = &self.querygen;
        if q.budgets.iter().any(|&b| b == 0) {
            return fail(format!("query budgets must be positive, got {:?}", q.budgets));
        }
        if !(0.0..=1.0).contains(&q.occluder_percentile) {
            return fail(format!("occluder_percentile must be in [0,1], got {}", q.occluder_percentile));
        }
        if !(q.shadow.r_min >= 0.0 && q.shadow.r_max >= q.shadow.r_min && q.shadow.sigma_lat >= 0.0)
        {
            return fail("shadow parameters must satisfy 0 <= r_min <= r_max, sigma_lat >= 0".into());
        }
        if self.rig.radars.is_empty() {
            return fail("rig needs at least one radar".into());
        }
        Ok(())
    }
}
