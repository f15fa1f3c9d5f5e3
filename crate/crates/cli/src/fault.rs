//! Backend wrapper that fails on demand, so the exit-code contract for
//! backend failures can be exercised end to end.
//!
//! `TRAJGUIDE_FAULT=denoise:N` makes the `N`-th denoiser call (0-based) fail.

use std::cell::Cell;

use trajguide::pipeline::{AttentionVjp, DiffusionBackend};
use trajguide::testbed::{AttentionStack, LatentShape, LatentVideo, NoiseSchedule, PixelVideo, PromptSpec, TemporalWrap};
use trajguide::{Error, Result};

use crate::failure::{CmdResult, Failure};

pub const FAULT_ENV: &str = "TRAJGUIDE_FAULT";

pub struct Faulty<B> {
    inner: B,
    fail_at: Option<usize>,
    calls: Cell<usize>,
}

impl<B> Faulty<B> {
    pub fn from_env(inner: B) -> CmdResult<Self> {
        let fail_at = match std::env::var(FAULT_ENV) {
            Ok(raw) => {
                let n = raw
                    .strip_prefix("denoise:")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| Failure::invalid(format!("{FAULT_ENV}='{raw}' is not of the form denoise:N")))?;
                Some(n)
            }
            Err(_) => None,
        };
        Ok(Faulty { inner, fail_at, calls: Cell::new(0) })
    }

    fn tick(&self) -> Result<()> {
        let n = self.calls.get();
        self.calls.set(n + 1);
        match self.fail_at {
            Some(k) if k == n => Err(Error::Internal(format!("injected backend fault at denoiser call {n}"))),
            _ => Ok(()),
        }
    }
}

impl<B: DiffusionBackend> DiffusionBackend for Faulty<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn latent_shape(&self) -> LatentShape {
        self.inner.latent_shape()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }

    fn attention_resolution(&self) -> (usize, usize) {
        self.inner.attention_resolution()
    }

    fn n_tokens(&self) -> usize {
        self.inner.n_tokens()
    }

    fn validate_prompt(&self, prompt: &PromptSpec) -> Result<()> {
        self.inner.validate_prompt(prompt)
    }

    fn supports_gradients(&self) -> bool {
        self.inner.supports_gradients()
    }

    fn denoise(
        &self,
        z: &LatentVideo,
        t: usize,
        prompt: &PromptSpec,
        capture: bool,
        temporal: Option<&dyn TemporalWrap>,
    ) -> Result<(LatentVideo, Option<AttentionStack>)> {
        self.tick()?;
        self.inner.denoise(z, t, prompt, capture, temporal)
    }

    fn attention_with_grad<'a>(
        &'a self,
        z: &LatentVideo,
        t: usize,
        prompt: &PromptSpec,
    ) -> Result<(AttentionStack, AttentionVjp<'a>)> {
        self.tick()?;
        self.inner.attention_with_grad(z, t, prompt)
    }

    fn encode(&self, video: &PixelVideo) -> Result<LatentVideo> {
        self.inner.encode(video)
    }

    fn decode(&self, z: &LatentVideo) -> Result<PixelVideo> {
        self.inner.decode(z)
    }

    fn weight_checksum(&self) -> String {
        self.inner.weight_checksum()
    }
}
