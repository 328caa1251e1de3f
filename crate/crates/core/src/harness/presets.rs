//! Built-in scenarios used by tests and the comparison sweeps.

use crate::config::ScenarioConfig;

/// Canonical occlusion scene, kept in sync with `configs/occlusion.json`:
/// a stationary ego at the origin, a wall 15 m ahead, a moving vehicle
/// fully hidden behind the wall, and a second agent off to the side with a
/// clear view of the hidden vehicle.
pub const OCCLUSION_TEMPLATE_JSON: &str = include_str!("../../../../configs/occlusion.json");

/// Open-road scene with randomly spawned traffic around two agents, kept
/// in sync with `configs/random.json`.
pub const RANDOM_TRAFFIC_JSON: &str = include_str!("../../../../configs/random.json");

pub fn occlusion_template() -> ScenarioConfig {
    ScenarioConfig::from_json(OCCLUSION_TEMPLATE_JSON)
        .expect("built-in occlusion template must parse")
}

pub fn random_traffic() -> ScenarioConfig {
    ScenarioConfig::from_json(RANDOM_TRAFFIC_JSON).expect("built-in traffic template must parse")
}
