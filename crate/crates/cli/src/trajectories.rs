use std::path::Path;

use serde::Serialize;
use serde_json::json;
use trajguide::evaluation::BenchmarkManifest;
use trajguide::trajectory::{complex_trajectories, simple_trajectories, COMPLEX_DATASET_VERSION, SIMPLE_NAMES};

use crate::artifacts::Staged;
use crate::failure::{CmdResult, Failure};
use crate::Outcome;

#[derive(Debug, Serialize)]
struct DatasetManifest {
    n_frames: usize,
    seed: u64,
    dataset_version: u32,
    simple: Vec<String>,
    complex: Vec<String>,
    benchmark: BenchmarkManifest,
}

/// Write the 8 simple and 17 complex trajectories plus `manifest.json`.
pub fn cmd_trajectories(out: &Path, n_frames: usize, seed: u64) -> CmdResult<Outcome> {
    let simple = simple_trajectories(n_frames).map_err(Failure::from_engine)?;
    let complex = complex_trajectories(n_frames, seed).map_err(Failure::from_engine)?;
    let mut staged = Staged::default();
    let mut names = (Vec::new(), Vec::new());
    for (i, (t, name)) in simple.iter().zip(SIMPLE_NAMES).enumerate() {
        let file = format!("simple_{i:02}_{name}.json");
        staged.add(&file, format!("{}\n", t.to_json()).into_bytes());
        names.0.push(file);
    }
    for (i, t) in complex.iter().enumerate() {
        let file = format!("complex_{i:02}.json");
        staged.add(&file, format!("{}\n", t.to_json()).into_bytes());
        names.1.push(file);
    }
    let all: Vec<String> = names.0.iter().chain(&names.1).cloned().collect();
    let manifest = DatasetManifest {
        n_frames,
        seed,
        dataset_version: COMPLEX_DATASET_VERSION,
        simple: names.0,
        complex: names.1,
        benchmark: BenchmarkManifest::new(all.clone()),
    };
    staged.add_json("manifest.json", &manifest)?;
    let artifacts = staged.commit(out)?;
    Ok(Outcome::new("trajectories", artifacts, json!({ "trajectories": all.len(), "n_frames": n_frames, "seed": seed })))
}
