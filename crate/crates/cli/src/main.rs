//! `trajguide`: generate trajectory-controlled toy videos, score them,
//! emit the trajectory datasets and render attention grids.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure. Every command
//! prints a one-line JSON outcome on stdout.

mod artifacts;
mod config;
mod evaluate;
mod failure;
mod fault;
mod generate;
mod trajectories;
mod visualize;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use trajguide::trajectory::COMPLEX_TRAJECTORY_SEED;

use crate::evaluate::EvaluateArgs;
use crate::failure::{CmdResult, Failure};

#[derive(Debug, Serialize)]
pub struct Outcome {
    pub command: &'static str,
    pub exit_code: u8,
    pub artifacts: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

impl Outcome {
    pub fn new(command: &'static str, artifacts: Vec<PathBuf>, summary: serde_json::Value) -> Self {
        Outcome { command, exit_code: 0, artifacts, summary }
    }
}

#[derive(Debug, Parser)]
#[command(name = "trajguide", version, about = "Box-trajectory control for latent video diffusion")]
struct Cli {
    /// Root for outputs whose location is not given explicitly.
    #[arg(long, global = true, env = "TRAJGUIDE_OUTPUT_ROOT", default_value = "trajguide-out")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the guided sampler and write latent, frames, loss log and report.
    Generate(GenerateCli),
    /// Compute control metrics for a run or an attention file.
    Evaluate(EvaluateCli),
    /// Write the simple and complex trajectory datasets plus a manifest.
    Trajectories(TrajectoriesCli),
    /// Render a frames × timesteps grid of one token's attention maps.
    VisualizeAttention(VisualizeCli),
}

#[derive(Debug, Args)]
struct GenerateCli {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Config fragments merged over the base config, in order.
    #[arg(long = "fragment")]
    fragments: Vec<PathBuf>,
    /// Dotted override, e.g. `guidance.t1=0`; keys match case-insensitively.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Module to disable (INPM, SC or STAM); repeatable.
    #[arg(long = "disable")]
    disable: Vec<String>,
    /// Output directory; defaults to the config's `output_dir`, then
    /// `<output-root>/<config stem>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateCli {
    /// Directory written by `generate`.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Attention container; defaults to `<run>/attention.bin`.
    #[arg(long)]
    attention: Option<PathBuf>,
    /// Trajectory file; defaults to the run's trajectory.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// External detections; replace the attention detector.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Token whose map is scored; defaults to the run's first target.
    #[arg(long)]
    token: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    /// Frame size `WIDTHxHEIGHT` for the pixel-space center distance.
    #[arg(long, value_parser = parse_size)]
    frame_size: Option<(f64, f64)>,
    /// Detector threshold in standard deviations above the map mean.
    #[arg(long, default_value_t = 1.0)]
    sigmas: f64,
    /// Report path; defaults to `<run>/evaluation.json` or
    /// `<output-root>/evaluation.json`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrajectoriesCli {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = COMPLEX_TRAJECTORY_SEED)]
    seed: u64,
}

#[derive(Debug, Args)]
struct VisualizeCli {
    /// Directory written by `generate`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    token: usize,
    /// Comma-separated frame indices; all frames by default.
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
    /// Pixels per attention cell.
    #[arg(long, default_value_t = 4)]
    scale: u32,
    /// PNG path; defaults to `<run>/attention_token<K>.png`.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(f64, f64), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(w)?, p(h)?))
}

fn run(cli: Cli) -> CmdResult<Outcome> {
    match cli.command {
        Command::Generate(a) => {
            let mut sets = a.sets.clone();
            if !a.disable.is_empty() {
                let mods = a
                    .disable
                    .iter()
                    .map(|m| m.parse::<trajguide::pipeline::Module>().map_err(Failure::from_engine))
                    .collect::<CmdResult<Vec<_>>>()?;
                sets.push(format!("disable={}", serde_json::to_string(&mods).expect("modules serialize")));
            }
            let loaded = config::load(&a.config, &a.fragments, &sets)?;
            let stem = a.config.file_stem().map(PathBuf::from).unwrap_or_else(|| "run".into());
            let out = a
                .out
                .or_else(|| loaded.run.output_dir.clone())
                .unwrap_or_else(|| cli.output_root.join(stem));
            generate::cmd_generate(&loaded, &out)
        }
        Command::Evaluate(a) => {
            let output = a.output.unwrap_or_else(|| match &a.run {
                Some(r) => r.join("evaluation.json"),
                None => cli.output_root.join("evaluation.json"),
            });
            evaluate::cmd_evaluate(&EvaluateArgs {
                run: a.run,
                attention: a.attention,
                trajectory: a.trajectory,
                detections: a.detections,
                token: a.token,
                output,
                iou_threshold: a.iou_threshold,
                frame_size: a.frame_size,
                sigmas: a.sigmas,
            })
        }
        Command::Trajectories(a) => {
            let out = a.out.unwrap_or_else(|| cli.output_root.join("trajectories"));
            trajectories::cmd_trajectories(&out, a.frames, a.seed)
        }
        Command::VisualizeAttention(a) => {
            let output = a.output.unwrap_or_else(|| a.run.join(format!("attention_token{}.png", a.token)));
            visualize::cmd_visualize(&a.run, a.token, a.frames.as_deref(), Path::new(&output), a.scale)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors are invalid input (exit 1), not clap's default of 2.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("trajguide: {f}");
            let line = serde_json::json!({ "exit_code": f.exit_code(), "error": f.to_string() });
            println!("{line}");
            ExitCode::from(f.exit_code())
        }
    }
}
