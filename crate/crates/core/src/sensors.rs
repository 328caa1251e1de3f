//! Planar LiDAR and Doppler-radar simulation.
//!
//! Rays are cast in 2-D against vehicle and obstacle footprints; per-point
//! heights are sampled from the hit body's height band so the BEV foreground
//! rules have realistic z statistics. Radar Doppler is synthesized in the
//! radar frame as the relative velocity projected on the line of sight,
//! which makes ego-motion compensation in [`crate::priors`] cancel exactly
//! for static targets.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{Rot2, Vec2};
use crate::scene::{Scene, VehicleState};
use crate::seeding::rng_from;

/// Radar extrinsics and beam parameters. Bearings are swept at 1 degree
/// steps across the field of view.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarMount {
    pub index: u32,
    /// Mount rotation relative to the vehicle, degrees.
    pub yaw_deg: f64,
    /// Mount translation in the vehicle frame, meters.
    pub offset: Vec2,
    pub fov_deg: f64,
    pub max_range_m: f64,
    /// Optional Doppler measurement noise; zero keeps returns exact.
    #[serde(default)]
    pub doppler_sigma_mps: f64,
}

impl RadarMount {
    pub fn yaw(&self) -> f64 {
        self.yaw_deg.to_radians()
    }

    /// Six-radar rig: three forward, one rear, two rear-facing side mounts.
    pub fn default_rig() -> Vec<RadarMount> {
        let mount = |index, yaw_deg, x, y| RadarMount {
            index,
            yaw_deg,
            offset: Vec2::new(x, y),
            fov_deg: 120.0,
            max_range_m: 150.0,
            doppler_sigma_mps: 0.0,
        };
        vec![
            mount(0, 0.0, 2.2, 0.0),
            mount(1, 40.0, 2.2, 0.8),
            mount(2, -40.0, 2.2, -0.8),
            mount(3, 180.0, -2.2, 0.0),
            mount(4, 140.0, 0.5, 0.9),
            mount(5, -140.0, 0.5, -0.9),
        ]
    }
}

/// Planar LiDAR parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarSpec {
    #[serde(default = "default_rays")]
    pub rays: usize,
    #[serde(default = "default_lidar_range")]
    pub max_range_m: f64,
    #[serde(default = "default_range_sigma")]
    pub range_sigma_m: f64,
}

fn default_rays() -> usize {
    720
}
fn default_lidar_range() -> f64 {
    120.0
}
fn default_range_sigma() -> f64 {
    0.02
}

impl Default for LidarSpec {
    fn default() -> Self {
        LidarSpec {
            rays: default_rays(),
            max_range_m: default_lidar_range(),
            range_sigma_m: default_range_sigma(),
        }
    }
}

/// Which sensor produced a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointSource {
    Lidar,
    Radar { mount: u32 },
}

/// One return. `position` is in the sensing vehicle's frame; `z` is height
/// relative to the sensor; `doppler` is present iff the source is radar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorPoint {
    pub position: Vec2,
    pub z: f64,
    pub doppler: Option<f64>,
    pub source: PointSource,
}

/// A batch of returns from one or more scans of the same vehicle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SensorCloud {
    pub points: Vec<SensorPoint>,
}

impl SensorCloud {
    pub fn extend(&mut self, other: SensorCloud) {
        self.points.extend(other.points);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Expresses a vehicle-frame velocity in a mount's frame.
pub fn rotate_ego_velocity(v_vehicle: Vec2, mount: &RadarMount) -> Vec2 {
    Rot2::new(mount.yaw()).apply_inv(v_vehicle)
}

/// Line-of-sight unit vector from a mount to a vehicle-frame point,
/// expressed in the mount frame. `None` when the point coincides with the
/// mount origin. Doppler synthesis and compensation both call this, so the
/// two sides agree bit for bit.
pub fn radar_unit_vector(position_vehicle: Vec2, mount: &RadarMount) -> Option<Vec2> {
    Rot2::new(mount.yaw())
        .apply_inv(position_vehicle - mount.offset)
        .normalized()
}

struct Hit {
    t: f64,
    velocity_world: Vec2,
    z_base: f64,
    z_top: f64,
}

/// Nearest footprint intersection along a world-frame ray, skipping the
/// sensing vehicle itself.
fn cast_ray(scene: &Scene, origin: Vec2, dir: Vec2, max_range: f64, self_id: u32) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |t: f64, velocity_world: Vec2, z_base: f64, z_top: f64| {
        if t <= max_range && best.as_ref().map_or(true, |b| t < b.t) {
            best = Some(Hit { t, velocity_world, z_base, z_top });
        }
    };
    for v in &scene.vehicles {
        if v.id == self_id {
            continue;
        }
        if let Some(t) = v.footprint().ray_hit(origin, dir) {
            consider(t, v.velocity, v.z_base, v.z_top);
        }
    }
    for o in &scene.obstacles {
        if let Some(t) = o.footprint.ray_hit(origin, dir) {
            consider(t, Vec2::ZERO, o.z_base, o.z_top);
        }
    }
    best
}

/// Sweeps one radar across its field of view. Bearings step at exactly one
/// degree; each hit yields a point with a synthesized Doppler value
/// `(v_target - v_ego) . u` in the mount frame. Deterministic per seed.
pub fn radar_scan(
    scene: &Scene,
    agent: &VehicleState,
    mount: &RadarMount,
    sensor_height: f64,
    seed: u64,
) -> SensorCloud {
    let mut rng = rng_from(seed);
    let pose = agent.pose();
    let origin_world = pose.to_world(mount.offset);
    let v_veh = agent.body_velocity();
    let v_ego_mount = rotate_ego_velocity(v_veh, mount);
    let vehicle_rot = Rot2::new(agent.yaw);
    let mount_rot = Rot2::new(mount.yaw());

    let steps = mount.fov_deg.round().max(0.0) as i64;
    let mut cloud = SensorCloud::default();
    for i in 0..=steps {
        let bearing_deg = -mount.fov_deg / 2.0 + i as f64;
        let world_angle = agent.yaw + mount.yaw() + bearing_deg.to_radians();
        let dir = Vec2::new(world_angle.cos(), world_angle.sin());
        let Some(hit) = cast_ray(scene, origin_world, dir, mount.max_range_m, agent.id) else {
            continue;
        };
        let world_point = origin_world + dir.scale(hit.t);
        let position = pose.to_local(world_point);
        let Some(u) = radar_unit_vector(position, mount) else {
            continue;
        };
        let v_target_mount = mount_rot.apply_inv(vehicle_rot.apply_inv(hit.velocity_world));
        let mut doppler = (v_target_mount - v_ego_mount).dot(u);
        let z_world = rng.gen_range(hit.z_base..=hit.z_top);
        if mount.doppler_sigma_mps > 0.0 {
            doppler += rng.sample::<f64, _>(StandardNormal) * mount.doppler_sigma_mps;
        }
        cloud.points.push(SensorPoint {
            position,
            z: z_world - sensor_height,
            doppler: Some(doppler),
            source: PointSource::Radar { mount: mount.index },
        });
    }
    cloud
}

/// Full-circle planar LiDAR sweep with Gaussian range noise and per-point
/// height sampling from the hit body's band. Deterministic per seed.
pub fn lidar_scan(
    scene: &Scene,
    agent: &VehicleState,
    spec: &LidarSpec,
    sensor_height: f64,
    seed: u64,
) -> SensorCloud {
    let mut rng = rng_from(seed);
    let mut cloud = SensorCloud::default();
    for i in 0..spec.rays {
        let local_angle = i as f64 * std::f64::consts::TAU / spec.rays as f64;
        let world_angle = agent.yaw + local_angle;
        let dir = Vec2::new(world_angle.cos(), world_angle.sin());
        let Some(hit) = cast_ray(scene, agent.position, dir, spec.max_range_m, agent.id) else {
            continue;
        };
        let range = if spec.range_sigma_m > 0.0 {
            hit.t + rng.sample::<f64, _>(StandardNormal) * spec.range_sigma_m
        } else {
            hit.t
        };
        let z_world = rng.gen_range(hit.z_base..=hit.z_top);
        let dir_local = Vec2::new(local_angle.cos(), local_angle.sin());
        cloud.points.push(SensorPoint {
            position: dir_local.scale(range),
            z: z_world - sensor_height,
            doppler: None,
            source: PointSource::Lidar,
        });
    }
    cloud
}
