//! Deterministic multi-agent cooperative-perception simulator.
//!
//! A fleet of connected agents senses a shared 2-D scene with planar LiDAR
//! and Doppler radar, builds bird's-eye-view feature pyramids and motion /
//! foreground prior maps, exchanges sparse halo-enriched features on demand,
//! and fuses them with gated deformable cross-attention. Everything is a
//! pure seeded forward computation: no training, no global state, and
//! byte-identical outputs for identical configs and seeds.
//!
//! Module map:
//! - [`scene`]: scenario generation, kinematics, pose noise, visibility oracle
//! - [`sensors`]: radar / LiDAR ray casting and Doppler synthesis
//! - [`bev`]: grids, pillarization, feature pyramids, warping, sampling
//! - [`priors`]: Doppler compensation, dynamic / foreground / confidence maps
//! - [`querygen`]: two-branch reference-point selection and offset heads
//! - [`comm`]: messages, wire codec, collaborator gating, bandwidth metering
//! - [`fusion`]: neighborhood assembly, deformable attention, gated blending
//! - [`harness`]: end-to-end frame pipeline, coverage metrics, sweeps

pub mod bev;
pub mod comm;
pub mod config;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod priors;
pub mod querygen;
pub mod scene;
pub mod seeding;
pub mod sensors;

pub use bev::{BevGrid, FeatureMap, FeaturePyramid, GridSpec, LevelGeom, PillarStats};
pub use comm::{BandwidthLedger, QueryMessage, SparseFeatureMessage};
pub use config::ScenarioConfig;
pub use error::{Error, Result};
pub use fusion::SparseNeighborhood;
pub use geometry::{OrientedBox, Pose2, Vec2};
pub use harness::{Mode, RunConfig};
pub use querygen::QuerySet;
pub use scene::{AgentPose, Scene, VehicleState};
pub use sensors::{RadarMount, SensorCloud};
