use super::denoiser::TemporalWrap;
use super::latent::LatentVideo;
use super::schedule::{ddim_step, ddim_update};
use super::text::PromptSpec;
use crate::error::Result;
use crate::pipeline::DiffusionBackend;

/// Plain DDIM sampling from `z_T` down to `z_0` over every schedule step,
/// optionally wrapping the temporal-attention calls.
pub fn sample_with<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z_t: &LatentVideo,
    prompt: &PromptSpec,
    temporal: Option<&dyn TemporalWrap>,
) -> Result<LatentVideo> {
    let sched = backend.schedule();
    let mut z = z_t.clone();
    for t in (1..=sched.steps()).rev() {
        let (eps, _) = backend.denoise(&z, t, prompt, false, temporal)?;
        z = ddim_step(&z, &eps, t, t - 1, sched)?;
    }
    Ok(z)
}

/// The unmodified backend sampler.
pub fn sample<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z_t: &LatentVideo,
    prompt: &PromptSpec,
) -> Result<LatentVideo> {
    sample_with(backend, z_t, prompt, None)
}

/// DDIM inversion: run the deterministic recurrence from `z_0` up to `z_T`,
/// evaluating the frozen denoiser at the current (less noisy) latent.
pub fn ddim_invert<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z0: &LatentVideo,
    prompt: &PromptSpec,
) -> Result<LatentVideo> {
    let sched = backend.schedule();
    let mut z = z0.clone();
    for t in 1..=sched.steps() {
        let (eps, _) = backend.denoise(&z, t, prompt, false, None)?;
        z = ddim_update(&z, &eps, sched.a_bar(t - 1), sched.a_bar(t))?;
    }
    Ok(z)
}
