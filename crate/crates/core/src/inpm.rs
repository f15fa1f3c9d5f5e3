//! Initial noise prior.
//!
//! 1. draw `z* ~ N(0, I)`
//! 2. sample a meta video from `z*` with spatial constraints on a static
//!    trajectory `{B^0}` (no shifted temporal attention)
//! 3. DDIM-invert it to `z_I`
//! 4. per frame, `Pix(z_T^f, B^f) = λ_p Pix(z_I^f, B^0) + (1 − λ_p) Pix(z*^f, B^f)`
//!
//! Outside every `B^f`, `z_T` is `z*` bitwise.

use std::path::Path;

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{run_sampler, DiffusionBackend, LoopSwitches};
use crate::resample;
use crate::spatial::GuidanceConfig;
use crate::testbed::container::{load_latent, save_latent, sidecar_path, LatentSidecar};
use crate::testbed::{ddim_invert, LatentVideo, PromptSpec};
use crate::trajectory::{quantize_box, BBox, BoxTrajectory, GridBox};

/// The mixed initial noise and its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrior {
    pub z_t: LatentVideo,
    pub z_i: LatentVideo,
    pub z_star: LatentVideo,
    pub meta_box: GridBox,
    pub lambda_p: f64,
    /// Mean argmax-in-box fraction over the meta run's guided updates.
    pub meta_argmax_in_box: Option<f64>,
}

/// Meta video latent and the per-update argmax-in-box fractions of its run.
#[derive(Debug, Clone)]
pub struct MetaVideo {
    pub latent: LatentVideo,
    pub argmax_in_box: Vec<f64>,
}

/// Sample from `z*` (seeded by `seed`) with spatial constraints on the
/// static trajectory `box0` repeated over every frame.
pub fn generate_meta_video<B: DiffusionBackend + ?Sized>(
    backend: &B,
    prompt: &PromptSpec,
    box0: BBox,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<MetaVideo> {
    meta_video(backend, prompt, box0, cfg, seed, true)
}

fn meta_video<B: DiffusionBackend + ?Sized>(
    backend: &B,
    prompt: &PromptSpec,
    box0: BBox,
    cfg: &GuidanceConfig,
    seed: u64,
    spatial_constraints: bool,
) -> Result<MetaVideo> {
    box0.validate()?;
    let shape = backend.latent_shape();
    let traj = BoxTrajectory::stationary(box0, shape.frames)?;
    let z_star = LatentVideo::gaussian(shape, seed);
    let switches = LoopSwitches { spatial_constraints, stam: false, step_stride: None };
    let (latent, trace) = run_sampler(backend, &z_star, prompt, &traj, cfg, switches)?;
    let argmax_in_box = trace.guidance_logs().map(|g| g.argmax_in_box).collect();
    Ok(MetaVideo { latent, argmax_in_box })
}

/// Blend the `box0` patch of `z_i` into each frame's trajectory box of
/// `z_star`. Boxes are latent-grid cells; a patch whose shape differs from
/// the target box is bilinearly resampled.
pub fn local_mixup(
    z_star: &LatentVideo,
    z_i: &LatentVideo,
    box0: GridBox,
    traj: &[GridBox],
    lambda_p: f64,
) -> Result<LatentVideo> {
    z_star.expect_shape(z_i)?;
    let shape = z_star.shape();
    if traj.len() != shape.frames {
        return Err(Error::validation(format!(
            "trajectory has {} boxes but the latent has {} frames",
            traj.len(),
            shape.frames
        )));
    }
    if !(0.0..=1.0).contains(&lambda_p) {
        return Err(Error::validation(format!("lambda_p must lie in [0, 1], got {lambda_p}")));
    }
    for b in std::iter::once(&box0).chain(traj) {
        if !b.fits(shape.width, shape.height) {
            return Err(Error::validation(format!("box {b:?} outside the latent grid")));
        }
    }
    let mut out = z_star.data().clone();
    for (f, bf) in traj.iter().enumerate() {
        let src = z_i.data().slice(s![f, .., box0.row_lo..box0.row_hi, box0.col_lo..box0.col_hi]);
        let mut dst = out.slice_mut(s![f, .., bf.row_lo..bf.row_hi, bf.col_lo..bf.col_hi]);
        for (c, mut dst_c) in dst.axis_iter_mut(Axis(0)).enumerate() {
            let src_c = src.index_axis(Axis(0), c);
            let patch = if src_c.dim() == dst_c.dim() {
                src_c.to_owned()
            } else {
                resample::bilinear(src_c, bf.height(), bf.width())
            };
            if patch.dim() != dst_c.dim() {
                return Err(Error::Internal("resampled patch shape mismatch".into()));
            }
            dst_c.zip_mut_with(&patch, |d, &p| *d = lambda_p * p + (1.0 - lambda_p) * *d);
        }
    }
    LatentVideo::new(out)
}

/// End-to-end prior construction; a pure function of its arguments.
pub fn build_initial_noise<B: DiffusionBackend + ?Sized>(
    backend: &B,
    prompt: &PromptSpec,
    traj: &BoxTrajectory,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<NoisePrior> {
    build_prior(backend, prompt, traj, cfg, seed, true)
}

/// [`build_initial_noise`] with the meta run's spatial constraints
/// switchable; with them off the meta video is the plain sampler output.
pub(crate) fn build_prior<B: DiffusionBackend + ?Sized>(
    backend: &B,
    prompt: &PromptSpec,
    traj: &BoxTrajectory,
    cfg: &GuidanceConfig,
    seed: u64,
    spatial_constraints: bool,
) -> Result<NoisePrior> {
    cfg.validate()?;
    let shape = backend.latent_shape();
    traj.expect_frames(shape.frames)?;
    let z_star = LatentVideo::gaussian(shape, seed);
    let box0 = traj.first();
    let meta = meta_video(backend, prompt, box0, cfg, seed, spatial_constraints)?;
    let mut z_meta = meta.latent;
    if cfg.meta_pixel_roundtrip {
        z_meta = backend.encode(&backend.decode(&z_meta)?)?;
    }
    let z_i = ddim_invert(backend, &z_meta, prompt)?;
    let grid = traj.quantize(shape.width, shape.height);
    let meta_box = quantize_box(&box0, shape.width, shape.height);
    let z_t = local_mixup(&z_star, &z_i, meta_box, &grid, cfg.lambda_p)?;
    let meta_argmax_in_box = (!meta.argmax_in_box.is_empty())
        .then(|| meta.argmax_in_box.iter().sum::<f64>() / meta.argmax_in_box.len() as f64);
    Ok(NoisePrior { z_t, z_i, z_star, meta_box, lambda_p: cfg.lambda_p, meta_argmax_in_box })
}

/// Sidecar fields identifying a stored prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTag {
    pub lambda_p: f64,
    pub box0: GridBox,
    pub trajectory_fingerprint: String,
}

/// Store `z_T` with a sidecar recording seed, `λ_p`, `B^0` and the trajectory.
pub fn save_prior<B: DiffusionBackend + ?Sized>(
    path: impl AsRef<Path>,
    prior: &NoisePrior,
    backend: &B,
    seed: u64,
    traj: &BoxTrajectory,
) -> Result<()> {
    let tag = PriorTag {
        lambda_p: prior.lambda_p,
        box0: prior.meta_box,
        trajectory_fingerprint: traj.fingerprint(),
    };
    let side = LatentSidecar {
        kind: "noise_prior".into(),
        shape: prior.z_t.shape().dims().to_vec(),
        seed,
        schedule_steps: backend.schedule().steps(),
        a_bar: backend.schedule().a_bars().to_vec(),
        extra: serde_json::to_value(tag)?,
    };
    save_latent(path, &prior.z_t, &side)
}

/// Load a stored `z_T` and its tag.
pub fn load_prior(path: impl AsRef<Path>) -> Result<(LatentVideo, PriorTag)> {
    let path = path.as_ref();
    let z = load_latent(path)?;
    let side: LatentSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if side.kind != "noise_prior" {
        return Err(Error::validation(format!("{} is not a noise prior", path.display())));
    }
    Ok((z, serde_json::from_value(side.extra)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbed::LatentShape;
    use proptest::prelude::*;

    fn fixture() -> (LatentVideo, LatentVideo, GridBox, Vec<GridBox>) {
        let shape = LatentShape::new(3, 2, 6, 6);
        let z_star = LatentVideo::gaussian(shape, 1);
        let z_i = LatentVideo::gaussian(shape, 2);
        let b0 = GridBox::new(0, 0, 2, 2);
        let traj = vec![b0, GridBox::new(2, 1, 4, 3), GridBox::new(4, 4, 6, 6)];
        (z_star, z_i, b0, traj)
    }

    #[test]
    fn boundary_ratios_are_exact() {
        let (zs, zi, b0, traj) = fixture();
        assert!(local_mixup(&zs, &zi, b0, &traj, 0.0).unwrap().bit_eq(&zs));
        let one = local_mixup(&zs, &zi, b0, &traj, 1.0).unwrap();
        for (f, b) in traj.iter().enumerate() {
            for c in 0..2 {
                for r in 0..2 {
                    for w in 0..2 {
                        assert_eq!(one.data()[[f, c, b.row_lo + r, b.col_lo + w]], zi.data()[[f, c, r, w]]);
                    }
                }
            }
        }
    }

    #[test]
    fn default_ratio_matches_scalar_blend() {
        let (zs, zi, b0, traj) = fixture();
        let out = local_mixup(&zs, &zi, b0, &traj, 0.8).unwrap();
        let b = traj[1];
        for c in 0..2 {
            for r in 0..2 {
                for w in 0..2 {
                    let expect = 0.8 * zi.data()[[1, c, r, w]] + 0.2 * zs.data()[[1, c, b.row_lo + r, b.col_lo + w]];
                    assert!((out.data()[[1, c, b.row_lo + r, b.col_lo + w]] - expect).abs() < 1e-15);
                }
            }
        }
        assert_eq!(out.data()[[1, 0, 0, 5]], zs.data()[[1, 0, 0, 5]]);
    }

    #[test]
    fn unequal_boxes_resample_the_patch() {
        let (zs, zi, b0, _) = fixture();
        let traj = vec![b0, GridBox::new(1, 1, 4, 4), GridBox::new(0, 3, 2, 6)];
        let out = local_mixup(&zs, &zi, b0, &traj, 1.0).unwrap();
        // corner-aligned resampling keeps the patch corners
        assert_eq!(out.data()[[1, 0, 1, 1]], zi.data()[[1, 0, 0, 0]]);
        assert_eq!(out.data()[[1, 0, 3, 3]], zi.data()[[1, 0, 1, 1]]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (zs, zi, b0, traj) = fixture();
        assert!(local_mixup(&zs, &zi, b0, &traj[..2], 0.5).is_err());
        assert!(local_mixup(&zs, &zi, b0, &traj, 1.5).is_err());
        assert!(local_mixup(&zs, &zi, GridBox::new(5, 5, 7, 7), &traj, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn mixup_is_affine_and_local(seed in 0u64..500, lp in 0.0f64..=1.0) {
            let shape = LatentShape::new(2, 2, 5, 5);
            let zs = LatentVideo::gaussian(shape, seed);
            let zi = LatentVideo::gaussian(shape, seed + 1000);
            let b0 = GridBox::new(1, 1, 3, 3);
            let traj = vec![b0, GridBox::new(2, 2, 4, 4)];
            let a = local_mixup(&zs, &zi, b0, &traj, 0.0).unwrap();
            let b = local_mixup(&zs, &zi, b0, &traj, 1.0).unwrap();
            let h = local_mixup(&zs, &zi, b0, &traj, 0.5).unwrap();
            for ((x, y), m) in a.data().iter().zip(b.data()).zip(h.data()) {
                prop_assert!((0.5 * (x + y) - m).abs() < 1e-15);
            }
            let out = local_mixup(&zs, &zi, b0, &traj, lp).unwrap();
            for ((f, c, r, w), v) in out.data().indexed_iter() {
                if !traj[f].contains(r, w) {
                    prop_assert_eq!(v.to_bits(), zs.data()[[f, c, r, w]].to_bits());
                }
            }
        }
    }
}
