//! Training-free trajectory control for latent video diffusion.
//!
//! Given a prompt, a target token and a per-frame bounding-box trajectory,
//! the engine steers a DDIM sampler so that the named object follows the
//! boxes. Three mechanisms cooperate:
//!
//! * [`inpm`] builds an initial noise carrying a positional prior
//!   (meta-video generation, DDIM inversion, per-frame local mixup);
//! * [`spatial`] defines cross-attention losses and the gradient update
//!   applied to the latent during the first guided steps;
//! * [`stam`] aligns each frame's box region with the first frame's box
//!   around every temporal-attention call.
//!
//! [`testbed`] ships a small deterministic video denoiser with frozen
//! seeded weights so every mechanism can be run and checked without a
//! pretrained backbone, and [`evaluation`] computes box-control metrics.

pub mod error;
pub mod evaluation;
pub mod inpm;
pub mod pipeline;
pub mod resample;
pub mod spatial;
pub mod stam;
pub mod testbed;
pub mod trajectory;

pub use error::{Error, Result};
