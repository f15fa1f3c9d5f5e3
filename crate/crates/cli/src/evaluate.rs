use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde_json::json;
use trajguide::evaluation::{
    control_metrics_with, detect_from_attention, detections_to_json, load_external_detections, DetectionPolicy,
    MetricOptions,
};
use trajguide::pipeline::RunConfig;
use trajguide::testbed::AttentionStack;
use trajguide::trajectory::BoxTrajectory;

use crate::artifacts::{load_attention, AttentionSource, Staged};
use crate::config::read_json;
use crate::failure::{CmdResult, Failure};
use crate::Outcome;

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub run: Option<PathBuf>,
    pub attention: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub token: Option<usize>,
    pub output: PathBuf,
    pub iou_threshold: f64,
    pub frame_size: Option<(f64, f64)>,
    pub sigmas: f64,
}

fn run_config(dir: &Path) -> CmdResult<RunConfig> {
    let path = dir.join("config.json");
    serde_json::from_value(read_json(&path)?).map_err(|e| Failure::reading(&path, e))
}

fn attention_stack(path: &Path) -> CmdResult<AttentionStack> {
    let (arr, index) = load_attention(path)?;
    // Prefer the evaluation capture; otherwise the latest sampling step.
    let pick = index
        .entries
        .iter()
        .position(|e| e.source == AttentionSource::Final)
        .unwrap_or(index.entries.len().saturating_sub(1));
    let entry = index.entries.get(pick).ok_or_else(|| Failure::reading(path, "no attention entries"))?;
    Ok(AttentionStack::new(arr.index_axis(Axis(0), pick).to_owned(), entry.timestep))
}

/// Score a generated video against its trajectory. External detections,
/// when given, replace the toy attention detector; the report's `source`
/// records which one produced the boxes.
pub fn cmd_evaluate(args: &EvaluateArgs) -> CmdResult<Outcome> {
    let run_cfg = args.run.as_deref().map(run_config).transpose()?;
    let traj = match (&args.trajectory, &run_cfg) {
        (Some(p), _) => BoxTrajectory::load(p).map_err(|e| Failure::reading(p, e))?,
        (None, Some(cfg)) => cfg.trajectory.resolve().map_err(Failure::from_engine)?,
        (None, None) => return Err(Failure::invalid("evaluate needs --trajectory or --run")),
    };

    let mut staged = Staged::default();
    let (dets, source) = match &args.detections {
        Some(p) => (load_external_detections(p).map_err(|e| Failure::reading(p, e))?, format!("external:{}", p.display())),
        None => {
            let att_path = match (&args.attention, &args.run) {
                (Some(p), _) => p.clone(),
                (None, Some(dir)) => dir.join("attention.bin"),
                (None, None) => return Err(Failure::invalid("evaluate needs --detections, --attention or --run")),
            };
            let stack = attention_stack(&att_path)?;
            let token = match (args.token, &run_cfg) {
                (Some(k), _) => k,
                (None, Some(cfg)) => cfg.prompt.target_indices[0],
                (None, None) => return Err(Failure::invalid("--token is required without --run")),
            };
            if token >= stack.n_tokens() {
                return Err(Failure::invalid(format!(
                    "token {token} is out of range: the attention has {} token maps",
                    stack.n_tokens()
                )));
            }
            let dets = detect_from_attention(&stack, token, DetectionPolicy { sigmas: args.sigmas })
                .map_err(Failure::from_engine)?;
            let stem = args.output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let name = format!("{stem}_detections.json");
            staged.add(name, detections_to_json(&dets).map_err(Failure::from_engine)?.into_bytes());
            (dets, format!("attention:token={token},timestep={}", stack.timestep()))
        }
    };

    let opts = MetricOptions { iou_threshold: args.iou_threshold, frame_size: args.frame_size };
    let mut report = control_metrics_with(&dets, &traj, opts).map_err(Failure::from_engine)?;
    report.source = source;

    let dir = args.output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = args.output.file_name().ok_or_else(|| Failure::invalid("--output has no file name"))?;
    staged.add_json(file, &report)?;
    let artifacts = staged.commit(dir)?;
    let summary = json!({
        "miou": report.miou,
        "ap50": report.ap50,
        "coverage": report.coverage,
        "center_distance": report.center_distance,
        "source": report.source,
    });
    Ok(Outcome::new("evaluate", artifacts, summary))
}
