//! Acceptance gate: one test per end-to-end guarantee. Each test prints a
//! single `[acceptance] <name>: PASS|FAIL` verdict line and then asserts,
//! so a red run names exactly the guarantees that broke.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use slimcomm_core::bev::{pillarize, FeatureMap, FeaturePyramid, GridSpec};
use slimcomm_core::comm::{
    budget_element_bound, build_feature_message, decode_feature_message, decode_query_message,
    encode_feature_message, encode_query_message, halo_extract, meter_frame, FeatureEntry,
    QueryMessage, ScaleEntries, SparseFeatureMessage, FULL_BUDGET_ELEMENT_BOUND,
    FULL_MAP_DENSE_ELEMENTS,
};
use slimcomm_core::config::PriorsConfig;
use slimcomm_core::fusion::{
    attention_from_logits, attention_logits, average_collaborators, fuse_frame, gated_blend,
    FusionParams, Gate, GateParams, ScaleAttentionParams, ScaleNeighborhood,
};
use slimcomm_core::geometry::Vec2;
use slimcomm_core::harness::pipeline::Pipeline;
use slimcomm_core::harness::presets::{occlusion_template, random_traffic};
use slimcomm_core::harness::run::{
    check_gradients, noise_csv, run_scenario, sweep_noise, sweep_tau,
};
use slimcomm_core::harness::{Mode, RunConfig};
use slimcomm_core::linalg::{softmax, Mat};
use slimcomm_core::priors::{build_priors, height_rule, PriorMaps};
use slimcomm_core::scene::{generate_scene, AgentPose, Scene};
use slimcomm_core::seeding::rng_from;
use slimcomm_core::sensors::{radar_scan, RadarMount, SensorCloud};
use slimcomm_core::ScenarioConfig;

fn verdict(name: &str, failures: &[String]) {
    let ok = failures.is_empty();
    println!("[acceptance] {name}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name} failed:\n{}", failures.join("\n"));
}

/// Ego agent surrounded by a ring of parked vehicles.
fn ring_scene_config() -> ScenarioConfig {
    let mut placements = vec![r#"{"position": [0, 0], "agent": true}"#.to_string()];
    for k in 0..12 {
        let angle = k as f64 * std::f64::consts::TAU / 12.0;
        placements.push(format!(
            r#"{{"position": [{:.3}, {:.3}], "yaw": {:.3}}}"#,
            25.0 * angle.cos(),
            25.0 * angle.sin(),
            angle
        ));
    }
    let text = format!(
        r#"{{"agents": 1, "frames": 1, "placements": [{}]}}"#,
        placements.join(",")
    );
    ScenarioConfig::from_json(&text).unwrap()
}

fn radar_cloud(scene: &Scene, ego_index: usize, mounts: &[RadarMount]) -> SensorCloud {
    let mut cloud = SensorCloud::default();
    for mount in mounts {
        cloud.extend(radar_scan(
            scene,
            &scene.vehicles[ego_index],
            mount,
            1.7,
            1000 + mount.index as u64,
        ));
    }
    cloud
}

fn priors_for(scene: &Scene, ego_index: usize, mounts: &[RadarMount], spec: &GridSpec) -> PriorMaps {
    let cloud = radar_cloud(scene, ego_index, mounts);
    assert!(!cloud.is_empty(), "radar returned no points");
    let stats = pillarize(&cloud, spec);
    build_priors(
        &cloud,
        &stats,
        scene.vehicles[ego_index].body_velocity(),
        mounts,
        spec,
        &PriorsConfig::default(),
        3,
    )
    .unwrap()
}

#[test]
fn doppler_cancellation_is_exact_for_any_ego_speed() {
    let mut failures = Vec::new();
    let cfg = ring_scene_config();
    let spec = cfg.grid_spec(false);
    let mounts = RadarMount::default_rig();
    let mut scene = generate_scene(&cfg, 5).unwrap();
    let ego_id = scene.agents[0];
    let ego_index = scene.vehicles.iter().position(|v| v.id == ego_id).unwrap();

    let started = Instant::now();
    for &speed in &[0.0, 5.0, 15.0, 30.0] {
        scene.vehicles[ego_index].velocity = Vec2::new(speed, 0.0);
        let priors = priors_for(&scene, ego_index, &mounts, &spec);
        let flagged = priors.dynamic.iter_nonzero().count();
        if flagged != 0 {
            failures.push(format!(
                "static ring at ego speed {speed} m/s flagged {flagged} cells, expected 0"
            ));
        }
    }

    // One ring vehicle starts receding radially at 3 m/s; it sits due +x
    // so the compensated radial speed is exactly 3.
    let target = scene
        .vehicles
        .iter()
        .position(|v| v.id != ego_id && v.position.y.abs() < 1e-9 && v.position.x > 0.0)
        .unwrap();
    scene.vehicles[target].velocity = Vec2::new(3.0, 0.0);
    let priors = priors_for(&scene, ego_index, &mounts, &spec);
    let flagged = priors.dynamic.iter_nonzero().count();
    if flagged == 0 {
        failures.push("3 m/s radial target flagged no cells".to_string());
    }

    let elapsed = started.elapsed();
    if elapsed >= Duration::from_secs(1) {
        failures.push(format!("runtime {elapsed:?} exceeded 1 s"));
    }
    verdict("doppler cancellation exact for any ego speed", &failures);
}

#[test]
fn radial_speed_threshold_is_strict() {
    let mut failures = Vec::new();
    let mounts = RadarMount::default_rig();
    let flag_count = |vx: f64| -> usize {
        let text = format!(
            r#"{{"agents": 1, "frames": 1, "placements": [
                {{"position": [0, 0], "agent": true}},
                {{"position": [20, 0], "velocity": [{vx}, 0]}}
            ]}}"#
        );
        let cfg = ScenarioConfig::from_json(&text).unwrap();
        let spec = cfg.grid_spec(false);
        let scene = generate_scene(&cfg, 3).unwrap();
        let ego_id = scene.agents[0];
        let ego_index = scene.vehicles.iter().position(|v| v.id == ego_id).unwrap();
        priors_for(&scene, ego_index, &mounts, &spec)
            .dynamic
            .iter_nonzero()
            .count()
    };
    let below = flag_count(0.99);
    let above = flag_count(1.01);
    if below != 0 {
        failures.push(format!("0.99 m/s radial target flagged {below} cells, expected 0"));
    }
    if above == 0 {
        failures.push("1.01 m/s radial target flagged no cells".to_string());
    }
    verdict("radial-speed threshold strict at 1 m/s", &failures);
}

#[test]
fn height_rules_match_the_truth_table() {
    let mut failures = Vec::new();
    let cfg = PriorsConfig::default();
    if (cfg.t_lower, cfg.t_upper, cfg.t_max) != (-1.2, 0.0, 1.0) {
        failures.push(format!(
            "default height band changed: ({}, {}, {})",
            cfg.t_lower, cfg.t_upper, cfg.t_max
        ));
    }
    let cases: [(&[f64], bool, &str); 4] = [
        (&[1.5], false, "single tall point"),
        (&[-2.0, -1.5], false, "all points below the band"),
        (&[-0.5, 1.5], false, "tall point vetoes an in-band point"),
        (&[-0.5], true, "lone in-band point"),
    ];
    for (zs, expected, label) in cases {
        let got = height_rule(zs, cfg.t_lower, cfg.t_upper, cfg.t_max);
        if got != expected {
            failures.push(format!("{label}: got {got}, expected {expected}"));
        }
    }
    verdict("foreground height rules match the truth table", &failures);
}

#[test]
fn query_budgets_and_transmission_bounds_hold() {
    let mut failures = Vec::new();

    let bound = budget_element_bound(&[200, 100, 50], &[128, 256, 512], true);
    if bound != FULL_BUDGET_ELEMENT_BOUND {
        failures.push(format!(
            "budget bound arithmetic drifted: {bound} vs {FULL_BUDGET_ELEMENT_BOUND}"
        ));
    }
    let ratio = FULL_BUDGET_ELEMENT_BOUND as f64 / FULL_MAP_DENSE_ELEMENTS as f64;
    if ratio > 0.1754 {
        failures.push(format!("bound/dense ratio {ratio:.6} exceeds 0.1754"));
    }

    // Full-size shapes: every frame and scale fills both branch budgets,
    // and one collaborator's reply stays under the element bound.
    let run = RunConfig {
        paper_shapes: true,
        ..RunConfig::default()
    };
    let out = run_scenario(&occlusion_template(), &run).unwrap();
    for m in &out.frames {
        if m.anchors != [400, 200, 100] {
            failures.push(format!(
                "frame {}: anchors {:?}, expected [400, 200, 100]",
                m.frame, m.anchors
            ));
        }
        if m.collaborators > 1 {
            failures.push(format!("frame {}: unexpected extra collaborators", m.frame));
        }
        let elements: u64 = m.ledger.elements.iter().sum();
        if elements > FULL_BUDGET_ELEMENT_BOUND {
            failures.push(format!(
                "frame {}: {elements} transmitted elements exceed the {FULL_BUDGET_ELEMENT_BOUND} bound",
                m.frame
            ));
        }
        if elements as f64 / out.dense_map_elements as f64 > 0.1754 {
            failures.push(format!("frame {}: element ratio above 0.1754", m.frame));
        }
    }
    if out.dense_map_elements != FULL_MAP_DENSE_ELEMENTS {
        failures.push(format!(
            "dense element count {} != {FULL_MAP_DENSE_ELEMENTS}",
            out.dense_map_elements
        ));
    }

    // Desk shapes on both templates: the budgets are shape-independent.
    for cfg in [occlusion_template(), random_traffic()] {
        let out = run_scenario(&cfg, &RunConfig::default()).unwrap();
        for m in &out.frames {
            if m.anchors != [400, 200, 100] {
                failures.push(format!(
                    "desk frame {}: anchors {:?}, expected [400, 200, 100]",
                    m.frame, m.anchors
                ));
            }
        }
    }
    verdict("query budgets and transmission bounds hold", &failures);
}

fn random_pose(rng: &mut ChaCha8Rng) -> AgentPose {
    AgentPose::exact(
        Vec2::new(
            rng.gen_range(-4000i32..4000) as f64 / 4.0,
            rng.gen_range(-4000i32..4000) as f64 / 4.0,
        ),
        rng.gen_range(-314i32..314) as f64 / 128.0,
    )
}

fn random_value(rng: &mut ChaCha8Rng) -> f32 {
    if rng.gen_bool(0.3) {
        0.0
    } else {
        rng.gen_range(-800i32..800) as f32 / 8.0
    }
}

fn random_feature_message(
    rng: &mut ChaCha8Rng,
    channels: &[usize],
    halo: bool,
    sender: u32,
    frame: u32,
) -> SparseFeatureMessage {
    let blocks = if halo { 9 } else { 1 };
    let scales = channels
        .iter()
        .map(|&c| {
            let entries = (0..rng.gen_range(0..8))
                .map(|_| FeatureEntry {
                    cell: (rng.gen_range(0..500), rng.gen_range(0..500)),
                    values: (0..blocks * c).map(|_| random_value(rng)).collect(),
                })
                .collect();
            ScaleEntries { entries }
        })
        .collect();
    SparseFeatureMessage {
        sender,
        frame,
        pose: random_pose(rng),
        halo,
        scales,
    }
}

fn random_query_message(rng: &mut ChaCha8Rng, sender: u32, frame: u32) -> QueryMessage {
    let cells = (0..3)
        .map(|_| {
            (0..rng.gen_range(0..30))
                .map(|_| (rng.gen_range(0..700), rng.gen_range(0..700)))
                .collect()
        })
        .collect();
    QueryMessage {
        sender,
        frame,
        pose: random_pose(rng),
        cells,
    }
}

#[test]
fn bandwidth_metering_and_codec_are_exact() {
    let mut failures = Vec::new();
    let channels = [2usize, 3, 4];
    let mut rng = rng_from(777);

    // Metering: payload is exactly 4 bytes per nonzero value, counted here
    // independently of the meter.
    for frame in 0..100u32 {
        let halo = rng.gen_bool(0.5);
        let msgs: Vec<SparseFeatureMessage> = (0..rng.gen_range(1..4))
            .map(|i| random_feature_message(&mut rng, &channels, halo, i, frame))
            .collect();
        let wire_total: u64 = msgs
            .iter()
            .map(|m| encode_feature_message(m).len() as u64)
            .sum();
        let query_bytes = rng.gen_range(0..200u64);
        let entry = meter_frame(frame, "slimcomm", &msgs, wire_total, query_bytes);

        let mut hand = [0u64; 3];
        for m in &msgs {
            for (l, scale) in m.scales.iter().enumerate() {
                for e in &scale.entries {
                    hand[l] += e.values.iter().filter(|&&x| x != 0.0).count() as u64;
                }
            }
        }
        let total: u64 = hand.iter().sum();
        if entry.elements != hand {
            failures.push(format!("frame {frame}: elements {:?} != {:?}", entry.elements, hand));
        }
        if entry.payload_bytes != 4 * total {
            failures.push(format!(
                "frame {frame}: payload {} != 4 * {total}",
                entry.payload_bytes
            ));
        }
        if entry.metadata_bytes != wire_total - 4 * total + query_bytes {
            failures.push(format!("frame {frame}: metadata bytes drifted"));
        }
        match (entry.cv_defined, total) {
            (true, 0) | (false, 1..) => {
                failures.push(format!("frame {frame}: cv definedness wrong"))
            }
            (true, t) if entry.cv_log2 != (t as f64).log2() => {
                failures.push(format!("frame {frame}: cv value wrong"))
            }
            _ => {}
        }
    }

    // Codec: 1,000 fuzzed messages round-trip bit for bit.
    for i in 0..500u32 {
        let q = random_query_message(&mut rng, i, i);
        if decode_query_message(&encode_query_message(&q)).unwrap() != q {
            failures.push(format!("query round-trip {i} mismatched"));
        }
        let halo = rng.gen_bool(0.5);
        let f = random_feature_message(&mut rng, &channels, halo, i, i);
        if decode_feature_message(&encode_feature_message(&f), &channels).unwrap() != f {
            failures.push(format!("feature round-trip {i} mismatched"));
        }
    }

    // Dedup: repeated requests never cost more than per-occurrence replies.
    let spec = GridSpec::desk();
    let geom = spec.level_geom(2);
    for i in 0..100 {
        let mut levels = Vec::new();
        for &c in &channels {
            let mut map = FeatureMap::for_geom(c, &geom);
            for _ in 0..rng.gen_range(1..30) {
                let (u, v) = (rng.gen_range(0..geom.width), rng.gen_range(0..geom.height));
                map.cell_mut(u, v)[0] = random_value(&mut rng) as f64;
            }
            levels.push(map);
        }
        let pyramid = FeaturePyramid { levels };
        let mut cells: Vec<(u16, u16)> = (0..rng.gen_range(1..25))
            .map(|_| (rng.gen_range(0..12), rng.gen_range(0..12)))
            .collect();
        cells.push(cells[0]); // force at least one duplicate
        let halo = rng.gen_bool(0.5);
        let query = QueryMessage {
            sender: 1,
            frame: 0,
            pose: AgentPose::exact(Vec2::ZERO, 0.0),
            cells: vec![cells.clone(), cells.clone(), cells.clone()],
        };
        let msg = build_feature_message(&pyramid, &query, halo, 2, 0, &query.pose);
        let deduped: u64 = msg.elements().iter().sum();
        let mut raw = 0u64;
        for map in &pyramid.levels {
            for (_, values) in halo_extract(map, &cells, halo) {
                raw += values.iter().filter(|&&x| x != 0.0).count() as u64;
            }
        }
        if deduped > raw {
            failures.push(format!("iteration {i}: dedup increased payload {deduped} > {raw}"));
        }
    }
    verdict("bandwidth metering and codec exact", &failures);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut failures = Vec::new();
    let started = Instant::now();
    for outcome in check_gradients(2024, 20) {
        if !outcome.passes(1e-4) {
            failures.push(format!(
                "{}: max rel err {:.3e}, non-finite {}",
                outcome.name, outcome.max_rel_err, outcome.non_finite
            ));
        }
    }
    let elapsed = started.elapsed();
    if elapsed >= Duration::from_secs(10) {
        failures.push(format!("runtime {elapsed:?} exceeded 10 s"));
    }
    verdict("analytic gradients match finite differences", &failures);
}

#[test]
fn fusion_degeneracies_hold() {
    let mut failures = Vec::new();
    let channels = 8usize;
    let heads = 4usize;
    let ch = channels / heads;
    let mut rng = rng_from(4242);

    // One-hot attention reduces to a bilinear sample.
    let mut nb = ScaleNeighborhood::empty(channels);
    for v in 0..6u16 {
        for u in 0..6u16 {
            let values: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            nb.cells.insert((u, v), values);
        }
    }
    let params = ScaleAttentionParams::identity_probe(channels, heads);
    let locations: Vec<(f64, f64)> = (0..heads * 9)
        .map(|_| (rng.gen_range(0.5..4.5), rng.gen_range(0.5..4.5)))
        .collect();
    let mut logits = vec![0.0; heads * 9];
    let chosen: Vec<usize> = (0..heads).map(|_| rng.gen_range(0..9)).collect();
    for (h, &p) in chosen.iter().enumerate() {
        logits[h * 9 + p] = 50.0;
    }
    let out = attention_from_logits(&logits, &locations, &nb, &params);
    for (h, &p) in chosen.iter().enumerate() {
        let (u, v) = locations[h * 9 + p];
        let mut sample = vec![0.0; channels];
        nb.sample_center_into(u, v, &mut sample);
        for c in 0..ch {
            let err = (out[h * ch + c] - sample[h * ch + c]).abs();
            if err > 1e-6 {
                failures.push(format!("one-hot head {h} channel {c}: error {err:.3e}"));
            }
        }
    }

    // Saturated gates reproduce either input.
    let geom = GridSpec::desk().level_geom(2);
    let c = 4usize;
    let mut ego = FeatureMap::for_geom(c, &geom);
    let mut cav = FeatureMap::for_geom(c, &geom);
    for _ in 0..40 {
        let (u, v) = (rng.gen_range(0..geom.width), rng.gen_range(0..geom.height));
        for k in 0..c {
            if rng.gen_bool(0.7) {
                ego.cell_mut(u, v)[k] = rng.gen_range(-1.0..1.0);
            }
            if rng.gen_bool(0.7) {
                cav.cell_mut(u, v)[k] = rng.gen_range(-1.0..1.0);
            }
        }
    }
    for (bias, take_cav, label) in [(20.0, true, "collaborator"), (-20.0, false, "ego")] {
        let gate = Gate::Learned(GateParams {
            w: Mat::zeros(c, 2 * c),
            b: vec![bias; c],
        });
        let blended = gated_blend(&ego, &cav, &gate).unwrap();
        let want = if take_cav { &cav } else { &ego };
        let worst = blended
            .values()
            .iter()
            .zip(want.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if worst > 1e-8 {
            failures.push(format!("{label} passthrough error {worst:.3e} > 1e-8"));
        }
    }

    // Fused output is exactly invariant to message arrival order.
    let pipeline = Pipeline::new(occlusion_template(), RunConfig::default()).unwrap();
    let scene = generate_scene(&pipeline.cfg, pipeline.seed).unwrap();
    let ego_frame = pipeline.agent_frame(&scene, 0, 0, true).unwrap();
    let queries = ego_frame.queries.as_ref().unwrap();
    let desk_channels = pipeline.channels;
    let mut make_msg = |sender: u32| {
        let scales = (0..3)
            .map(|l| {
                let entries = queries.scales[l]
                    .anchors
                    .iter()
                    .take(20)
                    .map(|&(u, v)| FeatureEntry {
                        cell: (u.round() as u16, v.round() as u16),
                        values: (0..9 * desk_channels[l])
                            .map(|_| random_value(&mut rng))
                            .collect(),
                    })
                    .collect();
                ScaleEntries { entries }
            })
            .collect();
        SparseFeatureMessage {
            sender,
            frame: 0,
            pose: AgentPose::exact(Vec2::ZERO, 0.0),
            halo: true,
            scales,
        }
    };
    let a = make_msg(9);
    let b = make_msg(5);
    let fusion = FusionParams::seeded(&desk_channels, 4, 99);
    let mut fused_orders = Vec::new();
    for msgs in [vec![a.clone(), b.clone()], vec![b, a]] {
        let nb = average_collaborators(&msgs, &desk_channels, fusion.average).unwrap();
        let fused = fuse_frame(&ego_frame.pyramid, Some(queries), &nb, &fusion, false).unwrap();
        fused_orders.push(fused);
    }
    if fused_orders[0].aggregated.values() != fused_orders[1].aggregated.values() {
        failures.push("aggregated output depends on message order".to_string());
    }
    for l in 0..3 {
        if fused_orders[0].blended.levels[l].values() != fused_orders[1].blended.levels[l].values()
        {
            failures.push(format!("blended level {l} depends on message order"));
        }
    }

    // Per head, the nine stencil weights always sum to one.
    let seeded = {
        let mut prng = rng_from(31);
        ScaleAttentionParams::seeded(channels, heads, &mut prng)
    };
    for probe in 0..50 {
        let embedding: Vec<f64> = (0..channels).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = attention_logits(&embedding, &seeded);
        for h in 0..heads {
            let sum: f64 = softmax(&logits[h * 9..(h + 1) * 9]).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                failures.push(format!("probe {probe} head {h}: weight sum {sum}"));
            }
        }
    }
    verdict("fusion degeneracies hold", &failures);
}

#[test]
fn occluded_recovery_requires_exploratory_queries() {
    let mut failures = Vec::new();
    let cfg = occlusion_template();
    let mean_occluded = |mode: Mode, failures: &mut Vec<String>| -> f64 {
        let mut total = 0.0;
        for seed in 0..20u64 {
            let run = RunConfig {
                mode,
                seed: Some(9000 + seed),
                ..RunConfig::default()
            };
            let summary = run_scenario(&cfg, &run).unwrap().summary();
            if mode == Mode::NoComm && summary.mean_occluded_coverage != 0.0 {
                failures.push(format!(
                    "no-comm seed {seed}: occluded coverage {} != 0",
                    summary.mean_occluded_coverage
                ));
            }
            total += summary.mean_occluded_coverage;
        }
        total / 20.0
    };
    let full = mean_occluded(Mode::Slimcomm, &mut failures);
    let ablated = mean_occluded(Mode::NoErp, &mut failures);
    let isolated = mean_occluded(Mode::NoComm, &mut failures);
    if !(full > ablated) {
        failures.push(format!(
            "mean occluded coverage {full:.4} not above the no-erp ablation {ablated:.4}"
        ));
    }
    if isolated != 0.0 {
        failures.push(format!("no-comm mean occluded coverage {isolated} != 0"));
    }
    verdict("occluded recovery requires exploratory queries", &failures);
}

#[test]
fn collaboration_threshold_sweep_is_monotone() {
    let mut failures = Vec::new();
    let taus = [0.0, 0.25, 0.5, 0.75];
    for (label, cfg) in [("occlusion", occlusion_template()), ("random", random_traffic())] {
        let rows = sweep_tau(&cfg, &RunConfig::default(), &taus).unwrap();
        for pair in rows.windows(2) {
            if pair[1].mean_collaborators > pair[0].mean_collaborators {
                failures.push(format!(
                    "{label}: collaborators rose from tau {} to {}",
                    pair[0].tau, pair[1].tau
                ));
            }
            if pair[1].total_payload_bytes > pair[0].total_payload_bytes {
                failures.push(format!(
                    "{label}: payload rose from tau {} to {}",
                    pair[0].tau, pair[1].tau
                ));
            }
            if pair[1].total_elements > pair[0].total_elements {
                failures.push(format!(
                    "{label}: elements rose from tau {} to {}",
                    pair[0].tau, pair[1].tau
                ));
            }
        }
    }
    verdict("collaboration threshold sweep is monotone", &failures);
}

#[test]
fn zero_noise_rows_reproduce_the_noiseless_run() {
    let mut failures = Vec::new();
    let mut cfg = occlusion_template();
    cfg.frames = 3;
    let run = RunConfig::default();
    let sigma_pos = [0.0, 0.3, 0.6];
    let sigma_yaw = [0.0, 0.5, 1.0];

    let rows = sweep_noise(&cfg, &run, &sigma_pos, &sigma_yaw, 20).unwrap();
    if rows.len() != sigma_pos.len() * sigma_yaw.len() * 20 {
        failures.push(format!("expected 180 rows, got {}", rows.len()));
    }
    let baseline = run_scenario(&cfg, &run).unwrap().summary();
    for row in rows.iter().filter(|r| r.sigma_pos_m == 0.0 && r.sigma_yaw_deg == 0.0) {
        if row.mean_visible_coverage != baseline.mean_visible_coverage
            || row.mean_occluded_coverage != baseline.mean_occluded_coverage
            || row.mean_collaborators != baseline.mean_collaborators
            || row.total_payload_bytes != baseline.total_payload_bytes
        {
            failures.push(format!(
                "zero-sigma rep {} differs from the noiseless run",
                row.rep
            ));
        }
    }

    let again = sweep_noise(&cfg, &run, &sigma_pos, &sigma_yaw, 20).unwrap();
    if noise_csv(&rows) != noise_csv(&again) {
        failures.push("noise report not deterministic across reruns".to_string());
    }
    verdict("zero-noise rows reproduce the noiseless run", &failures);
}

#[test]
fn cli_runs_are_byte_identical() {
    let mut failures = Vec::new();
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/occlusion.json");
    let run_once = |dir: &std::path::Path| -> Vec<u8> {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_slimcomm"))
            .args([
                "run",
                "--config",
                config,
                "--seed",
                "123",
                "--out",
                dir.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success(), "slimcomm run exited with {status}");
        std::fs::read(dir.join("metrics.csv")).unwrap()
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run_once(dir_a.path());
    let b = run_once(dir_b.path());
    if a != b {
        failures.push("metrics.csv differs between identical runs".to_string());
    }
    if a.is_empty() {
        failures.push("metrics.csv is empty".to_string());
    }
    verdict("cli runs are byte-identical", &failures);
}
