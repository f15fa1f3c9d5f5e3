//! Generation pipeline: noise prior, guided steps, plain steps.
//!
//! Sampler iteration `i` runs at timestep `t = T − i`. Iterations `i < T1`
//! apply the spatial-constraint update before denoising; iterations below
//! the STAM window wrap temporal attention. Disabled modules are skipped
//! entirely, so disabling all three reproduces the backend sampler bitwise.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{control_metrics, detect_from_attention, ControlReport, DetectionPolicy};
use crate::inpm::{build_prior, NoisePrior};
use crate::spatial::{guide_latent, GuidanceConfig, GuidanceLog};
use crate::stam::Stam;
use crate::testbed::{
    ddim_step, AttentionStack, LatentShape, LatentVideo, NoiseSchedule, PixelVideo, PromptSpec,
    TemporalWrap, TestbedConfig, ToyAutoencoder, ToyDenoiser,
};
use crate::trajectory::{BoxTrajectory, TrajectoryFile};

/// Vector-Jacobian product of a captured attention stack: `∂L/∂maps ↦ ∂L/∂z_t`.
pub type AttentionVjp<'a> = Box<dyn Fn(&Array4<f64>) -> Result<LatentVideo> + 'a>;

/// Capabilities the guidance engine needs from a video diffusion model.
///
/// STAM needs only the temporal wrap point of [`DiffusionBackend::denoise`];
/// spatial constraints additionally need [`DiffusionBackend::attention_with_grad`].
pub trait DiffusionBackend {
    fn name(&self) -> &str;
    fn latent_shape(&self) -> LatentShape;
    fn schedule(&self) -> &NoiseSchedule;
    /// `(height, width)` of captured attention maps.
    fn attention_resolution(&self) -> (usize, usize);
    /// Context length; captured stacks have this many token maps.
    fn n_tokens(&self) -> usize;
    fn validate_prompt(&self, prompt: &PromptSpec) -> Result<()>;
    fn supports_gradients(&self) -> bool;
    /// Noise prediction, optionally capturing cross-attention and wrapping
    /// every temporal-attention call.
    fn denoise(
        &self,
        z: &LatentVideo,
        t: usize,
        prompt: &PromptSpec,
        capture: bool,
        temporal: Option<&dyn TemporalWrap>,
    ) -> Result<(LatentVideo, Option<AttentionStack>)>;
    fn attention_with_grad<'a>(
        &'a self,
        z: &LatentVideo,
        t: usize,
        prompt: &PromptSpec,
    ) -> Result<(AttentionStack, AttentionVjp<'a>)>;
    fn encode(&self, video: &PixelVideo) -> Result<LatentVideo>;
    fn decode(&self, z: &LatentVideo) -> Result<PixelVideo>;
    fn weight_checksum(&self) -> String;
}

/// The toy denoiser plus toy autoencoder.
#[derive(Debug, Clone)]
pub struct Testbed {
    denoiser: ToyDenoiser,
    autoencoder: ToyAutoencoder,
}

impl Testbed {
    pub fn new(cfg: TestbedConfig) -> Result<Self> {
        let autoencoder = ToyAutoencoder::new(cfg.channels, cfg.seed.wrapping_add(1))?;
        Ok(Testbed { denoiser: ToyDenoiser::new(cfg)?, autoencoder })
    }

    pub fn denoiser(&self) -> &ToyDenoiser {
        &self.denoiser
    }

    pub fn autoencoder(&self) -> &ToyAutoencoder {
        &self.autoencoder
    }
}

impl DiffusionBackend for Testbed {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_shape(&self) -> LatentShape {
        self.denoiser.config().latent_shape()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.denoiser.schedule()
    }

    fn attention_resolution(&self) -> (usize, usize) {
        let s = self.latent_shape();
        self.denoiser.capture_resolution(s.height, s.width)
    }

    fn n_tokens(&self) -> usize {
        self.denoiser.config().max_tokens
    }

    fn validate_prompt(&self, prompt: &PromptSpec) -> Result<()> {
        let c = self.denoiser.config();
        prompt.validate(c.vocab_size, c.max_tokens)
    }

    fn supports_gradients(&self) -> bool {
        true
    }

    fn denoise(
        &self,
        z: &LatentVideo,
        t: usize,
        prompt: &PromptSpec,
        capture: bool,
        temporal: Option<&dyn TemporalWrap>,
    ) -> Result<(LatentVideo, Option<AttentionStack>)> {
        self.denoiser.denoise(z, t, prompt, capture, temporal)
    }

    fn attention_with_grad<'a>(
        &'a self,
        z: &LatentVideo,
        t: usize,
        prompt: &PromptSpec,
    ) -> Result<(AttentionStack, AttentionVjp<'a>)> {
        let (stack, tape) = self.denoiser.capture_attention(z, t, prompt)?;
        let vjp = move |g: &Array4<f64>| self.denoiser.attention_vjp(&tape, g);
        Ok((stack, Box::new(vjp)))
    }

    fn encode(&self, video: &PixelVideo) -> Result<LatentVideo> {
        self.autoencoder.encode(video)
    }

    fn decode(&self, z: &LatentVideo) -> Result<PixelVideo> {
        self.autoencoder.decode(z)
    }

    fn weight_checksum(&self) -> String {
        self.denoiser.weight_checksum()
    }
}

/// A guidance module that can be switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Module {
    Inpm,
    Sc,
    Stam,
}

impl std::str::FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "INPM" => Ok(Module::Inpm),
            "SC" => Ok(Module::Sc),
            "STAM" => Ok(Module::Stam),
            _ => Err(Error::validation(format!("unknown module '{s}' (expected INPM, SC or STAM)"))),
        }
    }
}

/// Inline boxes or a path to a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrajectoryRef {
    Path(PathBuf),
    Inline(TrajectoryFile),
}

impl TrajectoryRef {
    pub fn resolve(&self) -> Result<BoxTrajectory> {
        match self {
            TrajectoryRef::Path(p) => BoxTrajectory::load(p),
            TrajectoryRef::Inline(f) => BoxTrajectory::from_file(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureOptions {
    /// Capture attention of the final latent (`t = 1`) for evaluation.
    pub final_attention: bool,
    /// Keep the denoiser's attention every `step_stride` iterations and at
    /// the last one.
    pub step_stride: Option<usize>,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        CaptureOptions { final_attention: true, step_stride: None }
    }
}

/// One generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub prompt: PromptSpec,
    pub trajectory: TrajectoryRef,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub testbed: TestbedConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub disable: BTreeSet<Module>,
    #[serde(default)]
    pub capture: CaptureOptions,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_backend() -> String {
    "toy".into()
}

impl RunConfig {
    pub fn new(prompt: PromptSpec, trajectory: &BoxTrajectory) -> Self {
        RunConfig {
            prompt,
            trajectory: TrajectoryRef::Inline(trajectory.to_file()),
            guidance: GuidanceConfig::default(),
            testbed: TestbedConfig::default(),
            seed: 0,
            backend: default_backend(),
            disable: BTreeSet::new(),
            capture: CaptureOptions::default(),
            output_dir: None,
        }
    }

    pub fn enabled(&self, m: Module) -> bool {
        !self.disable.contains(&m)
    }

    /// Instantiate the configured backend.
    pub fn backend(&self) -> Result<Testbed> {
        if self.backend != "toy" {
            return Err(Error::validation(format!(
                "unknown backend '{}' (only 'toy' is available)",
                self.backend
            )));
        }
        if self.testbed.steps != self.guidance.total_steps {
            return Err(Error::validation(format!(
                "testbed.steps ({}) must equal guidance.total_steps ({})",
                self.testbed.steps, self.guidance.total_steps
            )));
        }
        Testbed::new(self.testbed.clone())
    }

    /// Check everything that can be checked without running the backend.
    pub fn validate<B: DiffusionBackend + ?Sized>(&self, backend: &B) -> Result<BoxTrajectory> {
        self.guidance.validate()?;
        if self.guidance.total_steps != backend.schedule().steps() {
            return Err(Error::validation(format!(
                "guidance.total_steps ({}) differs from the backend schedule ({} steps)",
                self.guidance.total_steps,
                backend.schedule().steps()
            )));
        }
        backend.validate_prompt(&self.prompt)?;
        let traj = self.trajectory.resolve()?;
        traj.expect_frames(backend.latent_shape().frames)?;
        if let Some(0) = self.capture.step_stride {
            return Err(Error::validation("capture.step_stride must be positive"));
        }
        let needs_grad = self.enabled(Module::Sc) && self.guidance.t1 > 0;
        if needs_grad && !self.guidance.all_weights_zero() && !backend.supports_gradients() {
            return Err(Error::Capability(format!(
                "backend '{}' does not support attention gradients, required by nonzero spatial-constraint weights",
                backend.name()
            )));
        }
        Ok(traj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Guided,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub timestep: usize,
    pub stage: Stage,
    pub spatial_constraints: bool,
    pub stam: bool,
    pub guidance: Vec<GuidanceLog>,
}

/// What one sampling loop did.
#[derive(Debug, Clone, Default)]
pub struct SamplerTrace {
    pub steps: Vec<StepRecord>,
    /// `(timestep, attention)` for each captured step.
    pub attention: Vec<(usize, AttentionStack)>,
    pub stam_calls: usize,
}

impl SamplerTrace {
    /// Total spatial loss of the first update at every guided step.
    pub fn guided_losses(&self) -> Vec<f64> {
        self.steps
            .iter()
            .filter_map(|s| s.guidance.first().map(|g| g.loss.total))
            .collect()
    }

    pub fn guidance_logs(&self) -> impl Iterator<Item = &GuidanceLog> {
        self.steps.iter().flat_map(|s| s.guidance.iter())
    }
}

/// Which mechanisms the sampling loop applies.
#[derive(Debug, Clone, Copy)]
pub struct LoopSwitches {
    pub spatial_constraints: bool,
    pub stam: bool,
    pub step_stride: Option<usize>,
}

/// The DDIM loop from `z_T` to `z_0` with optional guidance and STAM.
pub fn run_sampler<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z_t: &LatentVideo,
    prompt: &PromptSpec,
    traj: &BoxTrajectory,
    guidance: &GuidanceConfig,
    switches: LoopSwitches,
) -> Result<(LatentVideo, SamplerTrace)> {
    let sched = backend.schedule();
    let steps = sched.steps();
    let stam = Stam::new(traj.clone());
    let mut trace = SamplerTrace::default();
    let mut z = z_t.clone();
    for i in 0..steps {
        let t = steps - i;
        let guided = switches.spatial_constraints && i < guidance.t1;
        let shifted = switches.stam && i < guidance.stam_window();
        let mut logs = Vec::new();
        if guided {
            let (next, l) = guide_latent(backend, &z, t, i, prompt, traj, guidance)?;
            z = next;
            logs = l;
        }
        let keep = switches.step_stride.is_some_and(|s| i % s == 0 || i + 1 == steps);
        let hook: Option<&dyn TemporalWrap> = if shifted { Some(&stam) } else { None };
        let (eps, stack) = backend.denoise(&z, t, prompt, keep, hook)?;
        if let Some(stack) = stack {
            trace.attention.push((t, stack));
        }
        z = ddim_step(&z, &eps, t, t - 1, sched)?;
        trace.steps.push(StepRecord {
            index: i,
            timestep: t,
            stage: if i < guidance.t1 { Stage::Guided } else { Stage::Plain },
            spatial_constraints: guided,
            stam: shifted,
            guidance: logs,
        });
    }
    trace.stam_calls = stam.calls();
    Ok((z, trace))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub prior_ms: f64,
    pub sampling_ms: f64,
    pub total_ms: f64,
}

/// Machine-readable account of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub backend: String,
    pub seed: u64,
    pub disabled: Vec<Module>,
    pub guidance: GuidanceConfig,
    pub trajectory_fingerprint: String,
    pub steps: Vec<StepRecord>,
    pub guided_steps: usize,
    pub stam_steps: usize,
    pub stam_calls: usize,
    /// Mean argmax-in-box fraction over the meta run's guided updates.
    pub meta_argmax_in_box: Option<f64>,
    pub first_guided_loss: Option<f64>,
    pub last_guided_loss: Option<f64>,
    pub weight_checksum_before: String,
    pub weight_checksum_after: String,
    pub timing: Timing,
}

/// Result of [`generate`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub latent: LatentVideo,
    pub report: RunReport,
    pub prior: Option<NoisePrior>,
    /// Attention of the final latent at `t = 1`, when requested.
    pub final_attention: Option<AttentionStack>,
    pub step_attention: Vec<(usize, AttentionStack)>,
}

/// Run the full pipeline on `backend`.
pub fn generate<B: DiffusionBackend + ?Sized>(backend: &B, cfg: &RunConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let traj = cfg.validate(backend)?;
    let checksum_before = backend.weight_checksum();

    let (z_t, prior) = if cfg.enabled(Module::Inpm) {
        // Disabling SC removes it everywhere, including the meta run.
        let sc = cfg.enabled(Module::Sc);
        let p = build_prior(backend, &cfg.prompt, &traj, &cfg.guidance, cfg.seed, sc)?;
        (p.z_t.clone(), Some(p))
    } else {
        (LatentVideo::gaussian(backend.latent_shape(), cfg.seed), None)
    };
    let prior_ms = start.elapsed().as_secs_f64() * 1e3;

    let switches = LoopSwitches {
        spatial_constraints: cfg.enabled(Module::Sc),
        stam: cfg.enabled(Module::Stam),
        step_stride: cfg.capture.step_stride,
    };
    let sampling = Instant::now();
    let (latent, trace) = run_sampler(backend, &z_t, &cfg.prompt, &traj, &cfg.guidance, switches)?;
    let sampling_ms = sampling.elapsed().as_secs_f64() * 1e3;

    let final_attention = if cfg.capture.final_attention {
        backend.denoise(&latent, 1, &cfg.prompt, true, None)?.1
    } else {
        None
    };
    let losses = trace.guided_losses();
    let report = RunReport {
        backend: backend.name().to_string(),
        seed: cfg.seed,
        disabled: cfg.disable.iter().copied().collect(),
        guidance: cfg.guidance.clone(),
        trajectory_fingerprint: traj.fingerprint(),
        guided_steps: trace.steps.iter().filter(|s| s.spatial_constraints).count(),
        stam_steps: trace.steps.iter().filter(|s| s.stam).count(),
        stam_calls: trace.stam_calls,
        steps: trace.steps,
        meta_argmax_in_box: prior.as_ref().and_then(|p| p.meta_argmax_in_box),
        first_guided_loss: losses.first().copied(),
        last_guided_loss: losses.last().copied(),
        weight_checksum_before: checksum_before,
        weight_checksum_after: backend.weight_checksum(),
        timing: Timing { prior_ms, sampling_ms, total_ms: start.elapsed().as_secs_f64() * 1e3 },
    };
    Ok(RunOutput { latent, report, prior, final_attention, step_attention: trace.attention })
}

/// Control quality of one ablation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub disabled: Vec<Module>,
    pub control: ControlReport,
    pub run: RunReport,
}

/// [`generate`] with the named modules disabled, scored by the attention
/// detector on the first target token.
pub fn ablate<B: DiffusionBackend + ?Sized>(
    backend: &B,
    cfg: &RunConfig,
    disable: &BTreeSet<Module>,
) -> Result<AblationReport> {
    let mut run_cfg = cfg.clone();
    run_cfg.disable = disable.clone();
    run_cfg.capture.final_attention = true;
    let out = generate(backend, &run_cfg)?;
    let traj = run_cfg.trajectory.resolve()?;
    let stack = out
        .final_attention
        .ok_or_else(|| Error::Internal("final attention was not captured".into()))?;
    let token = run_cfg.prompt.target_indices[0];
    let dets = detect_from_attention(&stack, token, DetectionPolicy::default())?;
    let control = control_metrics(&dets, &traj)?;
    Ok(AblationReport { disabled: disable.iter().copied().collect(), control, run: out.report })
}
