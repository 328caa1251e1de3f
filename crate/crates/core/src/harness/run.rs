//! Scenario-level drivers: whole runs with CSV and JSON reporting,
//! threshold and pose-noise sweeps, mode comparison, and end-to-end
//! gradient verification of the differentiable pieces.

use std::fmt::Write as _;

use rand::Rng;
use serde::Serialize;

use crate::comm::LedgerEntry;
use crate::config::ScenarioConfig;
use crate::error::Result;
use crate::fusion::{attention_from_logits, attention_logit_vjp, ScaleAttentionParams,
    ScaleNeighborhood};
use crate::gradcheck::check_gradient;
use crate::harness::pipeline::Pipeline;
use crate::harness::{Mode, RunConfig};
use crate::linalg::dot;
use crate::querygen::{offset_hinge, offset_hinge_gradients};
use crate::seeding::{derive_seed, rng_from, tag};

/// Per-frame scalars kept from a run; heavy tensors are dropped.
#[derive(Debug, Clone)]
pub struct FrameMetrics {
    pub frame: u32,
    pub visible_coverage: f64,
    pub occluded_coverage: f64,
    pub collaborators: u32,
    /// Anchor counts per scale; zero in modes without queries.
    pub anchors: [usize; 3],
    pub offset_loss: Option<f64>,
    pub ledger: LedgerEntry,
}

/// All retained outputs of one scenario run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub mode: Mode,
    pub tau: f64,
    pub seed: u64,
    /// Dense per-frame element count of the run's pyramid shapes; the
    /// denominator for compression ratios.
    pub dense_map_elements: u64,
    pub frames: Vec<FrameMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub mode: String,
    pub tau: f64,
    pub seed: u64,
    pub frames: usize,
    pub mean_visible_coverage: f64,
    pub mean_occluded_coverage: f64,
    pub mean_collaborators: f64,
    pub total_elements: [u64; 3],
    pub mean_elements_per_frame: f64,
    pub dense_map_elements: u64,
    /// Mean transmitted elements over the dense per-frame element count.
    pub element_ratio_vs_dense: f64,
    pub total_payload_bytes: u64,
    pub mean_payload_bytes: f64,
    pub total_metadata_bytes: u64,
    /// Mean over frames where the volume was defined (anything was sent).
    pub mean_cv_log2: Option<f64>,
    pub cv_undefined_frames: usize,
    pub offset_loss_mean: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

impl RunOutput {
    /// One row per frame, floats to six decimal places so identical runs
    /// produce byte-identical files.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "frame,mode,visible_coverage,occluded_coverage,collaborators,\
             elements_l0,elements_l1,elements_l2,payload_bytes,cv_log2,metadata_bytes\n",
        );
        for m in &self.frames {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{},{},{},{},{},{:.6},{}",
                m.frame,
                self.mode.as_str(),
                m.visible_coverage,
                m.occluded_coverage,
                m.collaborators,
                m.ledger.elements[0],
                m.ledger.elements[1],
                m.ledger.elements[2],
                m.ledger.payload_bytes,
                m.ledger.cv_log2,
                m.ledger.metadata_bytes,
            )
            .expect("string writes cannot fail");
        }
        out
    }

    pub fn summary(&self) -> RunSummary {
        let n = self.frames.len();
        let mut total_elements = [0u64; 3];
        let mut total_payload = 0u64;
        let mut total_metadata = 0u64;
        for m in &self.frames {
            for l in 0..3 {
                total_elements[l] += m.ledger.elements[l];
            }
            total_payload += m.ledger.payload_bytes;
            total_metadata += m.ledger.metadata_bytes;
        }
        let mean_elements = if n == 0 {
            0.0
        } else {
            total_elements.iter().sum::<u64>() as f64 / n as f64
        };
        let cv_undefined = self.frames.iter().filter(|m| !m.ledger.cv_defined).count();
        RunSummary {
            mode: self.mode.as_str().to_string(),
            tau: self.tau,
            seed: self.seed,
            frames: n,
            mean_visible_coverage: mean(self.frames.iter().map(|m| m.visible_coverage))
                .unwrap_or(0.0),
            mean_occluded_coverage: mean(self.frames.iter().map(|m| m.occluded_coverage))
                .unwrap_or(0.0),
            mean_collaborators: mean(self.frames.iter().map(|m| f64::from(m.collaborators)))
                .unwrap_or(0.0),
            total_elements,
            mean_elements_per_frame: mean_elements,
            dense_map_elements: self.dense_map_elements,
            element_ratio_vs_dense: if self.dense_map_elements == 0 {
                0.0
            } else {
                mean_elements / self.dense_map_elements as f64
            },
            total_payload_bytes: total_payload,
            mean_payload_bytes: if n == 0 { 0.0 } else { total_payload as f64 / n as f64 },
            total_metadata_bytes: total_metadata,
            mean_cv_log2: mean(
                self.frames
                    .iter()
                    .filter(|m| m.ledger.cv_defined)
                    .map(|m| m.ledger.cv_log2),
            ),
            cv_undefined_frames: cv_undefined,
            offset_loss_mean: mean(self.frames.iter().filter_map(|m| m.offset_loss)),
        }
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

impl FrameMetrics {
    pub fn of(result: &crate::harness::pipeline::FrameResult) -> FrameMetrics {
        let mut anchors = [0usize; 3];
        if let Some(queries) = &result.queries {
            for (l, scale) in queries.scales.iter().enumerate().take(3) {
                anchors[l] = scale.anchors.len();
            }
        }
        FrameMetrics {
            frame: result.frame,
            visible_coverage: result.coverage.visible_fraction,
            occluded_coverage: result.coverage.occluded_fraction,
            collaborators: result.collaborators,
            anchors,
            offset_loss: result.offset_loss,
            ledger: result.ledger.clone(),
        }
    }
}

/// Runs one scenario end to end and keeps per-frame scalars.
pub fn run_scenario(cfg: &ScenarioConfig, run: &RunConfig) -> Result<RunOutput> {
    let pipeline = Pipeline::new(cfg.clone(), run.clone())?;
    let mut frames = Vec::with_capacity(cfg.frames as usize);
    pipeline.run_with(cfg.frames, |result| {
        frames.push(FrameMetrics::of(result));
        Ok(())
    })?;
    Ok(RunOutput {
        mode: run.mode,
        tau: run.tau,
        seed: pipeline.seed,
        dense_map_elements: pipeline.dense_map_elements(),
        frames,
    })
}

/// One collaboration-threshold setting of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct TauRow {
    pub tau: f64,
    pub mean_collaborators: f64,
    pub total_elements: u64,
    pub total_payload_bytes: u64,
    pub mean_visible_coverage: f64,
    pub mean_occluded_coverage: f64,
}

/// Reruns the scenario at each threshold; everything else fixed.
pub fn sweep_tau(cfg: &ScenarioConfig, run: &RunConfig, taus: &[f64]) -> Result<Vec<TauRow>> {
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut r = run.clone();
        r.tau = tau;
        let out = run_scenario(cfg, &r)?;
        let s = out.summary();
        rows.push(TauRow {
            tau,
            mean_collaborators: s.mean_collaborators,
            total_elements: s.total_elements.iter().sum(),
            total_payload_bytes: s.total_payload_bytes,
            mean_visible_coverage: s.mean_visible_coverage,
            mean_occluded_coverage: s.mean_occluded_coverage,
        });
    }
    Ok(rows)
}

pub fn tau_csv(rows: &[TauRow]) -> String {
    let mut out = String::from(
        "tau,mean_collaborators,total_elements,total_payload_bytes,\
         mean_visible_coverage,mean_occluded_coverage\n",
    );
    for r in rows {
        writeln!(
            out,
            "{:.6},{:.6},{},{},{:.6},{:.6}",
            r.tau,
            r.mean_collaborators,
            r.total_elements,
            r.total_payload_bytes,
            r.mean_visible_coverage,
            r.mean_occluded_coverage,
        )
        .expect("string writes cannot fail");
    }
    out
}

/// One pose-noise setting and repetition of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseRow {
    pub sigma_pos_m: f64,
    pub sigma_yaw_deg: f64,
    pub rep: u64,
    pub mean_visible_coverage: f64,
    pub mean_occluded_coverage: f64,
    pub mean_collaborators: f64,
    pub total_payload_bytes: u64,
}

/// Grid sweep over pose-noise levels, `reps` repetitions each. Only the
/// noise substream changes between repetitions, so zero-sigma rows match
/// the noiseless run exactly.
pub fn sweep_noise(
    cfg: &ScenarioConfig,
    run: &RunConfig,
    sigma_pos: &[f64],
    sigma_yaw: &[f64],
    reps: u64,
) -> Result<Vec<NoiseRow>> {
    let mut rows = Vec::new();
    for &sp in sigma_pos {
        for &sy in sigma_yaw {
            for rep in 0..reps.max(1) {
                let mut r = run.clone();
                r.sigma_pos_m = sp;
                r.sigma_yaw_deg = sy;
                r.noise_rep = rep;
                let out = run_scenario(cfg, &r)?;
                let s = out.summary();
                rows.push(NoiseRow {
                    sigma_pos_m: sp,
                    sigma_yaw_deg: sy,
                    rep,
                    mean_visible_coverage: s.mean_visible_coverage,
                    mean_occluded_coverage: s.mean_occluded_coverage,
                    mean_collaborators: s.mean_collaborators,
                    total_payload_bytes: s.total_payload_bytes,
                });
            }
        }
    }
    Ok(rows)
}

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let mut out = String::from(
        "sigma_pos_m,sigma_yaw_deg,rep,mean_visible_coverage,\
         mean_occluded_coverage,mean_collaborators,total_payload_bytes\n",
    );
    for r in rows {
        writeln!(
            out,
            "{:.6},{:.6},{},{:.6},{:.6},{:.6},{}",
            r.sigma_pos_m,
            r.sigma_yaw_deg,
            r.rep,
            r.mean_visible_coverage,
            r.mean_occluded_coverage,
            r.mean_collaborators,
            r.total_payload_bytes,
        )
        .expect("string writes cannot fail");
    }
    out
}

/// One mode of an ablation comparison, same scenario and seed.
#[derive(Debug, Clone, Serialize)]
pub struct ModeRow {
    pub mode: String,
    pub mean_visible_coverage: f64,
    pub mean_occluded_coverage: f64,
    pub mean_collaborators: f64,
    pub total_elements: u64,
    pub total_payload_bytes: u64,
    pub mean_cv_log2: Option<f64>,
}

/// Runs every mode on the same scenario and seed.
pub fn compare_modes(cfg: &ScenarioConfig, run: &RunConfig) -> Result<Vec<ModeRow>> {
    let mut rows = Vec::with_capacity(Mode::ALL.len());
    for mode in Mode::ALL {
        let mut r = run.clone();
        r.mode = mode;
        let out = run_scenario(cfg, &r)?;
        let s = out.summary();
        rows.push(ModeRow {
            mode: mode.as_str().to_string(),
            mean_visible_coverage: s.mean_visible_coverage,
            mean_occluded_coverage: s.mean_occluded_coverage,
            mean_collaborators: s.mean_collaborators,
            total_elements: s.total_elements.iter().sum(),
            total_payload_bytes: s.total_payload_bytes,
            mean_cv_log2: s.mean_cv_log2,
        });
    }
    Ok(rows)
}

pub fn modes_csv(rows: &[ModeRow]) -> String {
    let mut out = String::from(
        "mode,mean_visible_coverage,mean_occluded_coverage,mean_collaborators,\
         total_elements,total_payload_bytes,cv_log2\n",
    );
    for r in rows {
        let cv = r
            .mean_cv_log2
            .map(|v| format!("{:.6}", v))
            .unwrap_or_default();
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{},{},{}",
            r.mode,
            r.mean_visible_coverage,
            r.mean_occluded_coverage,
            r.mean_collaborators,
            r.total_elements,
            r.total_payload_bytes,
            cv,
        )
        .expect("string writes cannot fail");
    }
    out
}

pub fn modes_markdown(rows: &[ModeRow]) -> String {
    let mut out = String::from(
        "| mode | visible cov | occluded cov | collaborators | elements | payload bytes |\n\
         |---|---|---|---|---|---|\n",
    );
    for r in rows {
        writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.2} | {} | {} |",
            r.mode,
            r.mean_visible_coverage,
            r.mean_occluded_coverage,
            r.mean_collaborators,
            r.total_elements,
            r.total_payload_bytes,
        )
        .expect("string writes cannot fail");
    }
    out
}

/// Worst case over all probes of one gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradientCheckOutcome {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub non_finite: bool,
}

impl GradientCheckOutcome {
    pub fn passes(&self, tolerance: f64) -> bool {
        !self.non_finite && self.max_rel_err < tolerance
    }
}

/// Central-difference verification of the two analytic gradients the
/// pipeline exposes: the offset-regularization hinge and the attention
/// logits. Probes sit away from the hinge kink and from zero-norm offsets
/// so the finite differences see a smooth function.
pub fn check_gradients(seed: u64, probes: usize) -> Vec<GradientCheckOutcome> {
    let eps = 1e-4;
    let mut hinge = GradientCheckOutcome {
        name: "offset-hinge".to_string(),
        probes,
        max_rel_err: 0.0,
        non_finite: false,
    };
    let mut rng = rng_from(derive_seed(seed, &[tag::MODEL, 100]));
    for _ in 0..probes {
        let (h, e, delta) = loop {
            let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<(f64, f64)> {
                (0..n)
                    .map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
                    .collect()
            };
            let h = draw(&mut rng, 6);
            let e = draw(&mut rng, 6);
            let delta = rng.gen_range(0.1..2.0);
            let margin_ok = offset_hinge(&h, &e, delta)
                .map(|v| {
                    let mean_norm = |xs: &[(f64, f64)]| {
                        xs.iter().map(|&(a, b)| a.hypot(b)).sum::<f64>() / xs.len() as f64
                    };
                    let gap = delta - (mean_norm(&e) - mean_norm(&h));
                    // Stay clear of the kink and keep the active side testable.
                    gap.abs() > 0.05 && (v == 0.0 || v > 0.05)
                })
                .unwrap_or(false);
            let norms_ok = h
                .iter()
                .chain(&e)
                .all(|&(a, b)| a.hypot(b) > 0.05);
            if margin_ok && norms_ok {
                break (h, e, delta);
            }
        };
        let n_h = h.len();
        let x: Vec<f64> = h
            .iter()
            .chain(&e)
            .flat_map(|&(a, b)| [a, b])
            .collect();
        let f = move |p: &[f64]| -> f64 {
            let unpack = |s: &[f64]| -> Vec<(f64, f64)> {
                s.chunks_exact(2).map(|c| (c[0], c[1])).collect()
            };
            let hp = unpack(&p[..2 * n_h]);
            let ep = unpack(&p[2 * n_h..]);
            offset_hinge(&hp, &ep, delta).unwrap_or(0.0)
        };
        let (gh, ge) = offset_hinge_gradients(&h, &e, delta);
        let analytic: Vec<f64> = gh
            .iter()
            .chain(&ge)
            .flat_map(|&(a, b)| [a, b])
            .collect();
        let report = check_gradient(f, &x, &analytic, eps);
        hinge.max_rel_err = hinge.max_rel_err.max(report.max_rel_err);
        hinge.non_finite |= report.non_finite;
    }

    let mut logits_outcome = GradientCheckOutcome {
        name: "attention-logits".to_string(),
        probes,
        max_rel_err: 0.0,
        non_finite: false,
    };
    let channels = 8usize;
    let heads = 4usize;
    let mut rng = rng_from(derive_seed(seed, &[tag::MODEL, 101]));
    let params = ScaleAttentionParams::seeded(channels, heads, &mut rng);
    for _ in 0..probes {
        let mut nb = ScaleNeighborhood::empty(channels);
        for v in 0..6u16 {
            for u in 0..6u16 {
                let values: Vec<f64> =
                    (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
                nb.cells.insert((u, v), values);
            }
        }
        // Locations land strictly inside the populated block so bilinear
        // taps always hit transmitted cells and f stays smooth.
        let locations: Vec<(f64, f64)> = (0..heads * 9)
            .map(|_| (rng.gen_range(0.5..4.5), rng.gen_range(0.5..4.5)))
            .collect();
        let logits: Vec<f64> = (0..heads * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| -> f64 {
            dot(&upstream, &attention_from_logits(p, &locations, &nb, &params))
        };
        let analytic = attention_logit_vjp(&logits, &locations, &nb, &params, &upstream);
        let report = check_gradient(f, &logits, &analytic, eps);
        logits_outcome.max_rel_err = logits_outcome.max_rel_err.max(report.max_rel_err);
        logits_outcome.non_finite |= report.non_finite;
    }

    vec![hinge, logits_outcome]
}
