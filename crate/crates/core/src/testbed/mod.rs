//! A small deterministic latent video diffusion stack.
//!
//! Frozen, seeded random weights stand in for a pretrained backbone: the
//! guidance mechanisms are exercised by structure, not by learned semantics.
//! Everything here is a pure function of the weight seed and the inputs.

mod attention;
mod autoencoder;
pub mod container;
mod denoiser;
mod latent;
mod sampler;
mod schedule;
mod text;

pub use attention::{
    cross_attention_map, softmax_rows, temporal_rearrange, temporal_rearrange_batch,
    temporal_restore, temporal_restore_batch, AttentionStack,
};
pub use autoencoder::{PixelVideo, ToyAutoencoder, DOWNSAMPLE};
pub use denoiser::{AttentionTape, TemporalWrap, TestbedConfig, ToyDenoiser};
pub use latent::{LatentShape, LatentVideo};
pub use sampler::{ddim_invert, sample, sample_with};
pub use schedule::{add_noise, ddim_step, ddim_update, make_schedule, NoiseSchedule};
pub use text::{PromptSpec, PAD_TOKEN};
