use std::path::{Path, PathBuf};

use serde_json::json;
use trajguide::inpm::PriorTag;
use trajguide::pipeline::{generate, DiffusionBackend, Module};
use trajguide::testbed::container::{encode_array, LatentSidecar};
use trajguide::testbed::LatentVideo;

use crate::artifacts::{encode_attention, frame_images, png_bytes, AttentionEntry, AttentionSource, Staged};
use crate::config::Loaded;
use crate::failure::{CmdResult, Failure};
use crate::fault::Faulty;
use crate::Outcome;

fn latent_file<B: DiffusionBackend + ?Sized>(
    staged: &mut Staged,
    name: &str,
    kind: &str,
    z: &LatentVideo,
    backend: &B,
    seed: u64,
    extra: serde_json::Value,
) -> CmdResult<()> {
    let dims = z.shape().dims();
    staged.add(format!("{name}.bin"), encode_array(&dims, z.data().iter().copied()));
    let side = LatentSidecar {
        kind: kind.into(),
        shape: dims.to_vec(),
        seed,
        schedule_steps: backend.schedule().steps(),
        a_bar: backend.schedule().a_bars().to_vec(),
        extra,
    };
    staged.add_json(format!("{name}.json"), &side)
}

/// Run the pipeline and write its artifacts below `out`:
///
/// * `config.json` the resolved config (inline trajectory, tokenized prompt);
/// * `latent.bin` / `latent.json` the final latent and its sidecar;
/// * `prior.bin` / `prior.json` the initial noise, when INPM is enabled;
/// * `frames/frame_NNN.png` the decoded frames;
/// * `losses.jsonl` one guidance update per line;
/// * `report.json` the run report;
/// * `attention.bin` / `attention.json` captured cross-attention.
pub fn cmd_generate(loaded: &Loaded, out: &Path) -> CmdResult<Outcome> {
    let cfg = &loaded.run;
    let backend = Faulty::from_env(cfg.backend().map_err(Failure::from_engine)?)?;
    let run = generate(&backend, cfg).map_err(Failure::from_engine)?;
    let report = &run.report;

    let mut staged = Staged::default();
    staged.add_json("config.json", cfg)?;
    let fingerprint = loaded.trajectory.fingerprint();
    let extra = json!({ "trajectory_fingerprint": fingerprint, "disabled": report.disabled });
    latent_file(&mut staged, "latent", "latent", &run.latent, &backend, cfg.seed, extra)?;
    if let Some(prior) = &run.prior {
        let tag = PriorTag {
            lambda_p: prior.lambda_p,
            box0: prior.meta_box,
            trajectory_fingerprint: fingerprint.clone(),
        };
        let extra = serde_json::to_value(tag).map_err(|e| Failure::runtime(e.to_string()))?;
        latent_file(&mut staged, "prior", "noise_prior", &prior.z_t, &backend, cfg.seed, extra)?;
    }

    let video = backend.decode(&run.latent).map_err(Failure::from_engine)?;
    let mut frames = Vec::new();
    for (f, img) in frame_images(&video).iter().enumerate() {
        let rel = PathBuf::from("frames").join(format!("frame_{f:03}.png"));
        staged.add(&rel, png_bytes(img)?);
        frames.push(rel);
    }

    let mut log = String::new();
    for step in &report.steps {
        for g in &step.guidance {
            log.push_str(&serde_json::to_string(g).map_err(|e| Failure::runtime(e.to_string()))?);
            log.push('\n');
        }
    }
    staged.add("losses.jsonl", log.into_bytes());
    staged.add_json("report.json", report)?;

    let mut stacks: Vec<_> = run
        .step_attention
        .iter()
        .map(|(t, s)| (AttentionEntry { timestep: *t, source: AttentionSource::Step }, s))
        .collect();
    if let Some(s) = &run.final_attention {
        stacks.push((AttentionEntry { timestep: 1, source: AttentionSource::Final }, s));
    }
    if !stacks.is_empty() {
        let (bytes, index) = encode_attention(&stacks)?;
        staged.add("attention.bin", bytes);
        staged.add_json("attention.json", &index)?;
    }

    let artifacts = staged.commit(out)?;
    let summary = json!({
        "output_dir": out,
        "seed": cfg.seed,
        "disabled": report.disabled,
        "guided_steps": report.guided_steps,
        "stam_steps": report.stam_steps,
        "first_guided_loss": report.first_guided_loss,
        "last_guided_loss": report.last_guided_loss,
        "inpm": cfg.enabled(Module::Inpm),
        "frames": frames.len(),
    });
    Ok(Outcome::new("generate", artifacts, summary))
}
