//! Scene state, scenario generation, kinematics, and pose noise.
//!
//! Scenes are 2-D: every body is an oriented box footprint with a height
//! band `[z_base, z_top]` in world meters (ground = 0). The height band
//! feeds the foreground rules; occlusion is purely planar. Ground-truth
//! visibility is defined by [`line_of_sight`], a brute-force segment/box
//! test that downstream coverage metrics and sensor tests rely on.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Pose2, Rot2, Vec2};
use crate::seeding::{derive_seed, rng_from, tag};

/// Maximum placement attempts per randomly spawned vehicle.
pub const SPAWN_RETRY_LIMIT: u32 = 100;

/// Reference pose-noise ranges; larger values are accepted but flagged.
pub const NOISE_POS_RANGE_M: f64 = 0.6;
pub const NOISE_YAW_RANGE_DEG: f64 = 1.0;

/// One vehicle: rigid box moving with constant world-frame velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    pub position: Vec2,
    pub yaw: f64,
    /// World-frame velocity, m/s.
    pub velocity: Vec2,
    pub length: f64,
    pub width: f64,
    pub z_base: f64,
    pub z_top: f64,
}

impl VehicleState {
    pub fn footprint(&self) -> OrientedBox {
        OrientedBox::new(self.position, self.yaw, self.length, self.width)
    }

    pub fn pose(&self) -> Pose2 {
        Pose2 { position: self.position, yaw: self.yaw }
    }

    /// Velocity expressed in the vehicle's own frame.
    pub fn body_velocity(&self) -> Vec2 {
        Rot2::new(self.yaw).apply_inv(self.velocity)
    }
}

/// Static box obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub footprint: OrientedBox,
    pub z_base: f64,
    pub z_top: f64,
}

/// World snapshot at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub frame_id: u64,
    pub vehicles: Vec<VehicleState>,
    pub obstacles: Vec<Obstacle>,
    /// Vehicle ids that are connected agents, ascending.
    pub agents: Vec<u32>,
}

impl Scene {
    pub fn vehicle(&self, id: u32) -> Option<&VehicleState> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    /// True (noise-free) pose of a vehicle.
    pub fn agent_pose(&self, id: u32) -> Option<AgentPose> {
        self.vehicle(id).map(|v| AgentPose {
            position: v.position,
            yaw: v.yaw,
            noise: None,
        })
    }
}

/// Record of the noise that produced a perturbed pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub sigma_pos_m: f64,
    pub sigma_yaw_deg: f64,
    /// Set when a sigma exceeds the reference sweep range.
    pub out_of_range: bool,
}

/// A pose as an agent reports it; `noise` is present iff the pose was
/// perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub position: Vec2,
    pub yaw: f64,
    pub noise: Option<NoiseRecord>,
}

impl AgentPose {
    pub fn exact(position: Vec2, yaw: f64) -> Self {
        AgentPose { position, yaw, noise: None }
    }

    pub fn pose2(&self) -> Pose2 {
        Pose2 { position: self.position, yaw: self.yaw }
    }
}

/// Builds the frame-0 scene for a scenario. Placements are positioned
/// exactly (and must not overlap); remaining vehicles spawn at seeded
/// random poses with bounded retries.
pub fn generate_scene(config: &ScenarioConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let obstacles: Vec<Obstacle> = config
        .obstacles
        .iter()
        .map(|o| Obstacle {
            footprint: OrientedBox::new(
                Vec2::new(o.center[0], o.center[1]),
                o.yaw,
                o.length,
                o.width,
            ),
            z_base: o.z_base,
            z_top: o.z_top,
        })
        .collect();

    let mut vehicles: Vec<VehicleState> = Vec::new();
    for (i, p) in config.placements.iter().enumerate() {
        let v = VehicleState {
            id: i as u32,
            position: Vec2::new(p.position[0], p.position[1]),
            yaw: p.yaw,
            velocity: Vec2::new(p.velocity[0], p.velocity[1]),
            length: p.length,
            width: p.width,
            z_base: p.z_base,
            z_top: p.z_top,
        };
        if collides(&v.footprint(), &vehicles, &obstacles) {
            return Err(Error::Config(format!("placement {i} overlaps an existing body")));
        }
        vehicles.push(v);
    }

    let mut rng = rng_from(derive_seed(seed, &[tag::SPAWN]));
    let [sx, sy] = config.spawn_area;
    let [v_lo, v_hi] = config.speed_range_mps;
    let spawn_count = config.vehicles as usize + config.agent_shortfall();
    for k in 0..spawn_count {
        let id = vehicles.len() as u32;
        let mut placed = false;
        for _ in 0..SPAWN_RETRY_LIMIT {
            let x = rng.gen_range(-sx..=sx);
            let y = rng.gen_range(-sy..=sy);
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let speed = if v_hi > v_lo { rng.gen_range(v_lo..=v_hi) } else { v_lo };
            let v = VehicleState {
                id,
                position: Vec2::new(x, y),
                yaw,
                velocity: Rot2::new(yaw).apply(Vec2::new(speed, 0.0)),
                length: 4.5,
                width: 2.0,
                z_base: 0.4,
                z_top: 1.6,
            };
            if !collides(&v.footprint(), &vehicles, &obstacles) {
                vehicles.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement { index: k, retries: SPAWN_RETRY_LIMIT });
        }
    }

    let flagged: Vec<u32> = config
        .placements
        .iter()
        .enumerate()
        .filter(|(_, p)| p.agent)
        .map(|(i, _)| i as u32)
        .collect();
    let agents = if flagged.is_empty() {
        (0..config.agents).collect()
    } else {
        flagged
    };

    Ok(Scene { frame_id: 0, vehicles, obstacles, agents })
}

fn collides(fp: &OrientedBox, vehicles: &[VehicleState], obstacles: &[Obstacle]) -> bool {
    vehicles.iter().any(|v| v.footprint().overlaps(fp))
        || obstacles.iter().any(|o| o.footprint.overlaps(fp))
}

/// Advances every vehicle by one constant-velocity step of `dt` seconds.
pub fn step_scene(scene: &Scene, dt: f64) -> Result<Scene> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Argument(format!("step_scene requires dt > 0, got {dt}")));
    }
    let mut next = scene.clone();
    next.frame_id += 1;
    for v in &mut next.vehicles {
        v.position = v.position + v.velocity.scale(dt);
    }
    Ok(next)
}

/// Adds zero-mean Gaussian noise to a pose. Sigmas must be non-negative;
/// values beyond the reference ranges are accepted and flagged in the
/// returned noise record. With both sigmas zero the pose is unchanged bit
/// for bit.
pub fn inject_pose_noise(
    pose: &AgentPose,
    sigma_pos_m: f64,
    sigma_yaw_deg: f64,
    seed: u64,
) -> Result<AgentPose> {
    if sigma_pos_m < 0.0 || sigma_yaw_deg < 0.0 {
        return Err(Error::Argument(format!(
            "noise sigmas must be non-negative, got pos {sigma_pos_m}, yaw {sigma_yaw_deg}"
        )));
    }
    let mut rng = rng_from(seed);
    let dx: f64 = rng.sample::<f64, _>(StandardNormal) * sigma_pos_m;
    let dy: f64 = rng.sample::<f64, _>(StandardNormal) * sigma_pos_m;
    let dyaw: f64 =
        rng.sample::<f64, _>(StandardNormal) * sigma_yaw_deg.to_radians();
    let mut yaw = pose.yaw + dyaw;
    // Renormalize to (-pi, pi].
    while yaw > std::f64::consts::PI {
        yaw -= std::f64::consts::TAU;
    }
    while yaw <= -std::f64::consts::PI {
        yaw += std::f64::consts::TAU;
    }
    Ok(AgentPose {
        position: pose.position + Vec2::new(dx, dy),
        yaw,
        noise: Some(NoiseRecord {
            sigma_pos_m,
            sigma_yaw_deg,
            out_of_range: sigma_pos_m > NOISE_POS_RANGE_M || sigma_yaw_deg > NOISE_YAW_RANGE_DEG,
        }),
    })
}

/// Ground-truth visibility: true when the open segment `from -> to` crosses
/// no obstacle and no vehicle other than those in `ignore`. The endpoint
/// target itself should be listed in `ignore` so its own body does not
/// occlude it.
pub fn line_of_sight(scene: &Scene, from: Vec2, to: Vec2, ignore: &[u32]) -> bool {
    for o in &scene.obstacles {
        if o.footprint.segment_crosses(from, to) {
            return false;
        }
    }
    for v in &scene.vehicles {
        if ignore.contains(&v.id) {
            continue;
        }
        if v.footprint().segment_crosses(from, to) {
            return false;
        }
    }
    true
}
