//! Command-line front end: seeded scenario runs across communication
//! modes, threshold and pose-noise sweeps, mode comparison tables, and
//! gradient verification. All outputs are deterministic per config+seed.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use slimcomm_core::harness::pipeline::{FrameResult, Pipeline};
use slimcomm_core::harness::run::{
    check_gradients, compare_modes, modes_csv, modes_markdown, noise_csv, sweep_noise,
    sweep_tau, tau_csv, FrameMetrics, RunOutput,
};
use slimcomm_core::harness::{Mode, RunConfig};
use slimcomm_core::{Result, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "slimcomm",
    version,
    about = "Deterministic multi-agent cooperative-perception simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario end to end; writes metrics.csv and summary.json.
    Run(RunArgs),
    /// Rerun one scenario across collaboration thresholds.
    SweepTau(SweepTauArgs),
    /// Rerun one scenario across broadcast pose-noise levels.
    SweepNoise(SweepNoiseArgs),
    /// Run every communication mode on the same scenario and seed.
    Compare(CompareArgs),
    /// Verify analytic gradients against central finite differences.
    CheckGradients(CheckGradientsArgs),
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::from_str(s).map_err(|e| e.to_string())
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Scenario description (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Communication mode: slimcomm, full-map, no-erp, no-hrp, no-halo,
    /// no-comm.
    #[arg(long, default_value = "slimcomm", value_parser = parse_mode)]
    mode: Mode,
    /// Collaboration threshold on the warped foreground density.
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Full-size grid and channel shapes instead of the fast desk shapes.
    #[arg(long)]
    paper_shapes: bool,
    /// Shorthand for --mode no-erp.
    #[arg(long, conflicts_with_all = ["no_hrp", "no_halo"])]
    no_erp: bool,
    /// Shorthand for --mode no-hrp.
    #[arg(long, conflicts_with = "no_halo")]
    no_hrp: bool,
    /// Shorthand for --mode no-halo.
    #[arg(long)]
    no_halo: bool,
}

impl CommonArgs {
    fn scenario(&self) -> Result<ScenarioConfig> {
        ScenarioConfig::from_path(&self.config)
    }

    fn run_config(&self) -> RunConfig {
        let mode = if self.no_erp {
            Mode::NoErp
        } else if self.no_hrp {
            Mode::NoHrp
        } else if self.no_halo {
            Mode::NoHalo
        } else {
            self.mode
        };
        RunConfig {
            mode,
            tau: self.tau,
            seed: self.seed,
            paper_shapes: self.paper_shapes,
            ..RunConfig::default()
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Broadcast position noise, meters (standard deviation).
    #[arg(long, default_value_t = 0.0)]
    sigma_pos: f64,
    /// Broadcast heading noise, degrees (standard deviation).
    #[arg(long, default_value_t = 0.0)]
    sigma_yaw: f64,
    /// Noise repetition index; changes only the noise draws.
    #[arg(long, default_value_t = 0)]
    noise_rep: u64,
    /// Overrides the scenario's frame count.
    #[arg(long)]
    frames: Option<u32>,
    /// Writes each frame's raw wire messages into this directory.
    #[arg(long)]
    dump_messages: Option<PathBuf>,
    /// Writes each frame's fused level-0 tensor into this directory.
    #[arg(long)]
    dump_fused: Option<PathBuf>,
    /// Output directory for metrics.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepTauArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Thresholds to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
    taus: Vec<f64>,
    /// Output directory for tau_sweep.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepNoiseArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Position-noise levels, meters.
    #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.6")]
    sigma_pos: Vec<f64>,
    /// Heading-noise levels, degrees.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1.0")]
    sigma_yaw: Vec<f64>,
    /// Noise repetitions per level.
    #[arg(long, default_value_t = 20)]
    reps: u64,
    /// Output directory for noise_sweep.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory for modes.csv and modes.md.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckGradientsArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    probes: usize,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn dump_messages(dir: &std::path::Path, result: &FrameResult) -> Result<()> {
    if !result.query_wire.is_empty() {
        fs::write(
            dir.join(format!("f{:04}_query.bin", result.frame)),
            &result.query_wire,
        )?;
    }
    for (i, wire) in result.feature_wires.iter().enumerate() {
        fs::write(
            dir.join(format!("f{:04}_reply{:02}.bin", result.frame, i)),
            wire,
        )?;
    }
    Ok(())
}

fn dump_fused(dir: &std::path::Path, result: &FrameResult) -> Result<()> {
    let map = &result.fused.aggregated;
    let mut bytes = Vec::with_capacity(map.values().len() * 4);
    for &x in map.values() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let stem = format!("f{:04}_fused", result.frame);
    fs::write(dir.join(format!("{stem}.f32")), &bytes)?;
    let sidecar = serde_json::json!({
        "frame": result.frame,
        "scale": 0,
        "channels": map.channels,
        "width": map.width,
        "height": map.height,
        "dtype": "f32le",
        "layout": "cell-major: index = (v * width + u) * channels + c",
    });
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = args.common.scenario()?;
    if let Some(frames) = args.frames {
        cfg.frames = frames;
    }
    let mut run = args.common.run_config();
    run.sigma_pos_m = args.sigma_pos;
    run.sigma_yaw_deg = args.sigma_yaw;
    run.noise_rep = args.noise_rep;

    let pipeline = Pipeline::new(cfg.clone(), run.clone())?;
    if let Some(dir) = &args.dump_messages {
        fs::create_dir_all(dir)?;
    }
    if let Some(dir) = &args.dump_fused {
        fs::create_dir_all(dir)?;
    }
    let mut frames = Vec::with_capacity(cfg.frames as usize);
    pipeline.run_with(cfg.frames, |result| {
        if let Some(dir) = &args.dump_messages {
            dump_messages(dir, result)?;
        }
        if let Some(dir) = &args.dump_fused {
            dump_fused(dir, result)?;
        }
        frames.push(FrameMetrics::of(result));
        Ok(())
    })?;
    let output = RunOutput {
        mode: run.mode,
        tau: run.tau,
        seed: pipeline.seed,
        dense_map_elements: pipeline.dense_map_elements(),
        frames,
    };

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("metrics.csv"), output.metrics_csv())?;
    fs::write(args.out.join("summary.json"), output.summary_json()?)?;
    println!(
        "wrote {} frames ({} mode, seed {}) to {}",
        output.frames.len(),
        output.mode.as_str(),
        output.seed,
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep_tau(args: &SweepTauArgs) -> Result<()> {
    let cfg = args.common.scenario()?;
    let rows = sweep_tau(&cfg, &args.common.run_config(), &args.taus)?;
    let csv = tau_csv(&rows);
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("tau_sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep_noise(args: &SweepNoiseArgs) -> Result<()> {
    let cfg = args.common.scenario()?;
    let rows = sweep_noise(
        &cfg,
        &args.common.run_config(),
        &args.sigma_pos,
        &args.sigma_yaw,
        args.reps,
    )?;
    let csv = noise_csv(&rows);
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("noise_sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let cfg = args.common.scenario()?;
    let rows = compare_modes(&cfg, &args.common.run_config())?;
    let mut md = modes_markdown(&rows);
    let occluded = |name: &str| {
        rows.iter()
            .find(|r| r.mode == name)
            .map(|r| r.mean_occluded_coverage)
    };
    if let (Some(full), Some(ablated)) = (occluded("slimcomm"), occluded("no-erp")) {
        md.push_str(&format!(
            "\nExploratory-branch ablation: occluded coverage {:.4} -> {:.4} \
             (delta {:+.4} without it)\n",
            full,
            ablated,
            ablated - full
        ));
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("modes.csv"), modes_csv(&rows))?;
    fs::write(args.out.join("modes.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn cmd_check_gradients(args: &CheckGradientsArgs) -> Result<bool> {
    let mut all_ok = true;
    for outcome in check_gradients(args.seed, args.probes) {
        let ok = outcome.passes(args.tolerance);
        all_ok &= ok;
        println!(
            "[gradcheck] {}: max rel err {:.3e} over {} probes -> {}",
            outcome.name,
            outcome.max_rel_err,
            outcome.probes,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(all_ok)
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run(args) => cmd_run(args).map(|()| true),
        Command::SweepTau(args) => cmd_sweep_tau(args).map(|()| true),
        Command::SweepNoise(args) => cmd_sweep_noise(args).map(|()| true),
        Command::Compare(args) => cmd_compare(args).map(|()| true),
        Command::CheckGradients(args) => cmd_check_gradients(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
