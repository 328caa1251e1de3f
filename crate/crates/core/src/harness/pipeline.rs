//! Per-frame engine: sense, encode, exchange, fuse, and meter one scene
//! frame from the first agent's point of view. Every random draw comes
//! from a purpose-tagged seed, so any stage can be re-run in isolation.

use crate::bev::{
    encode_features, pillarize, warp_feature_map, EncoderParams, FeaturePyramid, GridSpec,
    Interp, PillarStats,
};
use crate::comm::{
    build_feature_message, build_full_map_message, build_query_message, decode_feature_message,
    decode_query_message, encode_feature_message, encode_query_message, meter_frame,
    should_collaborate, LedgerEntry, QueryMessage, SparseFeatureMessage,
};
use crate::config::ScenarioConfig;
use crate::error::Result;
use crate::fusion::{average_collaborators, fuse_frame, FusedFrame, FusionParams};
use crate::harness::coverage::{coverage_frame, CoverageFrame};
use crate::harness::{Mode, RunConfig};
use crate::querygen::{
    fine_cells, generate_queries, offset_regularization_loss, GeneratorParams, QuerySet,
};
use crate::scene::{generate_scene, inject_pose_noise, step_scene, AgentPose, Scene};
use crate::seeding::{derive_seed, tag};
use crate::sensors::{lidar_scan, radar_scan, SensorCloud};

/// One agent's per-frame products.
pub struct AgentFrame {
    /// Index into `scene.vehicles`.
    pub vehicle_index: usize,
    pub id: u32,
    pub cloud: SensorCloud,
    pub stats: PillarStats,
    pub pyramid: FeaturePyramid,
    pub priors: crate::priors::PriorMaps,
    /// Pose this agent broadcasts; carries injected noise when enabled.
    pub broadcast: AgentPose,
    pub queries: Option<QuerySet>,
}

/// Everything one fused frame produced, for metrics and dumps.
pub struct FrameResult {
    pub frame: u32,
    pub collaborators: u32,
    /// Level-0 query cells the ego could not issue (empty query) while a
    /// collaborator was asked; diagnostic for the selection rule.
    pub empty_query_flagged: bool,
    pub fused: FusedFrame,
    pub queries: Option<QuerySet>,
    pub ledger: LedgerEntry,
    pub offset_loss: Option<f64>,
    pub coverage: CoverageFrame,
    /// Encoded query message, empty when the mode sends none.
    pub query_wire: Vec<u8>,
    /// Encoded feature messages, in sender order.
    pub feature_wires: Vec<Vec<u8>>,
}

/// Deterministic end-to-end runner for one scenario and run config.
pub struct Pipeline {
    pub cfg: ScenarioConfig,
    pub run: RunConfig,
    pub spec: GridSpec,
    pub channels: [usize; 3],
    pub seed: u64,
    encoder: EncoderParams,
    generator: GeneratorParams,
    fusion: FusionParams,
}

impl Pipeline {
    pub fn new(cfg: ScenarioConfig, run: RunConfig) -> Result<Pipeline> {
        cfg.validate()?;
        let seed = run.seed.unwrap_or(cfg.seed);
        let spec = cfg.grid_spec(run.paper_shapes);
        let channels = cfg.channels(run.paper_shapes);
        let encoder = EncoderParams::seeded(&channels, derive_seed(seed, &[tag::MODEL, 0]));
        let generator = GeneratorParams::seeded(
            &channels,
            cfg.querygen.heads,
            derive_seed(seed, &[tag::MODEL, 1]),
        );
        let fusion = FusionParams::seeded(
            &channels,
            cfg.querygen.heads,
            derive_seed(seed, &[tag::MODEL, 2]),
        );
        Ok(Pipeline {
            cfg,
            run,
            spec,
            channels,
            seed,
            encoder,
            generator,
            fusion,
        })
    }

    /// Element count of one dense uncompressed pyramid at this run's
    /// shapes; the denominator for compression ratios.
    pub fn dense_map_elements(&self) -> u64 {
        self.channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let geom = self.spec.level_geom(l);
                (c * geom.width * geom.height) as u64
            })
            .sum()
    }

    /// Senses, encodes, and (for the ego) generates queries for one agent.
    pub fn agent_frame(
        &self,
        scene: &Scene,
        agent_ord: usize,
        frame: u32,
        with_queries: bool,
    ) -> Result<AgentFrame> {
        let id = scene.agents[agent_ord];
        let vehicle_index = scene
            .vehicles
            .iter()
            .position(|v| v.id == id)
            .expect("agent id always resolves to a vehicle");
        let vehicle = &scene.vehicles[vehicle_index];

        let mut cloud = lidar_scan(
            scene,
            vehicle,
            &self.cfg.rig.lidar,
            self.cfg.rig.sensor_height,
            derive_seed(self.seed, &[tag::LIDAR, frame as u64, id as u64]),
        );
        for mount in &self.cfg.rig.radars {
            cloud.extend(radar_scan(
                scene,
                vehicle,
                mount,
                self.cfg.rig.sensor_height,
                derive_seed(
                    self.seed,
                    &[tag::RADAR, frame as u64, id as u64, mount.index as u64],
                ),
            ));
        }
        let stats = pillarize(&cloud, &self.spec);
        let pyramid = encode_features(&stats, &self.spec, &self.channels, &self.encoder);
        let priors = crate::priors::build_priors(
            &cloud,
            &stats,
            vehicle.body_velocity(),
            &self.cfg.rig.radars,
            &self.spec,
            &self.cfg.priors,
            self.channels.len(),
        )?;
        let broadcast = inject_pose_noise(
            &AgentPose::exact(vehicle.position, vehicle.yaw),
            self.run.sigma_pos_m,
            self.run.sigma_yaw_deg,
            derive_seed(
                self.seed,
                &[tag::NOISE, frame as u64, id as u64, self.run.noise_rep],
            ),
        )?;
        let queries = if with_queries && self.run.mode.generates_queries() {
            Some(generate_queries(
                &priors,
                &pyramid,
                &self.spec,
                &self.cfg.querygen,
                &self.generator,
                self.run.mode != Mode::NoHrp,
                self.run.mode != Mode::NoErp,
                derive_seed(self.seed, &[tag::SHADOW, frame as u64, id as u64]),
            )?)
        } else {
            None
        };
        Ok(AgentFrame {
            vehicle_index,
            id,
            cloud,
            stats,
            pyramid,
            priors,
            broadcast,
            queries,
        })
    }

    /// Warps one collaborator's pyramid into the requester's claimed
    /// frame, trusting both broadcast poses.
    fn warp_to_requester(
        &self,
        collaborator: &AgentFrame,
        requester_pose: &AgentPose,
    ) -> FeaturePyramid {
        let levels = collaborator
            .pyramid
            .levels
            .iter()
            .enumerate()
            .map(|(l, map)| {
                warp_feature_map(
                    map,
                    &self.spec.level_geom(l),
                    collaborator.broadcast.pose2(),
                    requester_pose.pose2(),
                    Interp::Bilinear,
                )
            })
            .collect();
        FeaturePyramid { levels }
    }

    /// Runs one frame from the first agent's perspective.
    pub fn run_frame(&self, scene: &Scene, frame: u32) -> Result<FrameResult> {
        let mode = self.run.mode;
        let ego = self.agent_frame(scene, 0, frame, true)?;
        let mut collaborators: Vec<AgentFrame> = Vec::new();
        for ord in 1..scene.agents.len() {
            collaborators.push(self.agent_frame(scene, ord, frame, false)?);
        }

        let mut query_wire: Vec<u8> = Vec::new();
        let mut feature_wires: Vec<Vec<u8>> = Vec::new();
        let mut messages: Vec<SparseFeatureMessage> = Vec::new();
        let mut responders = 0u32;
        let mut empty_query_flagged = false;

        match mode {
            Mode::NoComm => {}
            Mode::FullMap => {
                // Baseline: everyone transmits a full warped pyramid, no
                // query round. The requester pose travels out of band.
                for collab in &collaborators {
                    let warped = self.warp_to_requester(collab, &ego.broadcast);
                    let msg =
                        build_full_map_message(&warped, collab.id, frame, &collab.broadcast);
                    let wire = encode_feature_message(&msg);
                    messages.push(decode_feature_message(&wire, &self.channels)?);
                    feature_wires.push(wire);
                    responders += 1;
                }
            }
            _ => {
                let queries = ego.queries.as_ref().expect("query modes always generate");
                let qmsg = self.query_message(queries, ego.id, frame, &ego.broadcast);
                query_wire = encode_query_message(&qmsg);
                // Honest wire round trip: collaborators act on the decoded
                // message, including the f32-rounded pose.
                let qmsg_rx = decode_query_message(&query_wire)?;
                let geom0 = self.spec.level_geom(0);
                for collab in &collaborators {
                    let (respond, flagged) = should_collaborate(
                        &collab.priors.density_levels[0],
                        &geom0,
                        collab.broadcast.pose2(),
                        &qmsg_rx,
                        self.run.tau,
                    );
                    empty_query_flagged |= flagged;
                    if !respond {
                        continue;
                    }
                    let warped = self.warp_to_requester(collab, &qmsg_rx.pose);
                    let msg = build_feature_message(
                        &warped,
                        &qmsg_rx,
                        mode.halo(),
                        collab.id,
                        frame,
                        &collab.broadcast,
                    );
                    let wire = encode_feature_message(&msg);
                    messages.push(decode_feature_message(&wire, &self.channels)?);
                    feature_wires.push(wire);
                    responders += 1;
                }
            }
        }

        let nb = average_collaborators(&messages, &self.channels, self.fusion.average)?;
        let fused = fuse_frame(
            &ego.pyramid,
            ego.queries.as_ref(),
            &nb,
            &self.fusion,
            mode == Mode::NoComm,
        )?;
        let ledger = meter_frame(
            frame,
            mode.as_str(),
            &messages,
            feature_wires.iter().map(|w| w.len() as u64).sum(),
            query_wire.len() as u64,
        );
        let coverage = coverage_frame(
            scene,
            ego.vehicle_index,
            &self.spec,
            self.cfg.rig.lidar.max_range_m,
            &fused.aggregated,
            ego.queries.as_ref(),
        );
        let offset_loss = ego
            .queries
            .as_ref()
            .map(|qs| offset_regularization_loss(qs).value);
        Ok(FrameResult {
            frame,
            collaborators: responders,
            empty_query_flagged,
            fused,
            queries: ego.queries,
            ledger,
            offset_loss,
            coverage,
            query_wire,
            feature_wires,
        })
    }

    /// Builds the query message; anchor cells by default, rounded fine
    /// sampling cells when the scenario opts into per-fine-point halos.
    fn query_message(
        &self,
        queries: &QuerySet,
        sender: u32,
        frame: u32,
        pose: &AgentPose,
    ) -> QueryMessage {
        if !self.cfg.querygen.halo_per_fine_point {
            return build_query_message(queries, sender, frame, pose);
        }
        let cells = queries
            .scales
            .iter()
            .map(|scale| {
                let mut cells: Vec<(u16, u16)> = fine_cells(scale)
                    .into_iter()
                    .map(|(u, v)| (u as u16, v as u16))
                    .collect();
                cells.sort_unstable_by_key(|&(u, v)| (v, u));
                cells
            })
            .collect();
        QueryMessage {
            sender,
            frame,
            pose: *pose,
            cells,
        }
    }

    /// Steps the scene through `frames` frames, invoking the sink after
    /// each fused frame.
    pub fn run_with<F>(&self, frames: u32, mut sink: F) -> Result<()>
    where
        F: FnMut(&FrameResult) -> Result<()>,
    {
        let mut scene = generate_scene(&self.cfg, self.seed)?;
        for frame in 0..frames {
            let result = self.run_frame(&scene, frame)?;
            sink(&result)?;
            if frame + 1 < frames {
                scene = step_scene(&scene, self.cfg.dt)?;
            }
        }
        Ok(())
    }
}
