//! Artifact staging and on-disk formats owned by the command line.
//!
//! Commands build every artifact in memory first and write them only after
//! the work succeeded; each file goes through temp-then-rename. A failing
//! command therefore never leaves a file at a final path.

use std::path::{Path, PathBuf};

use image::{ImageEncoder, RgbImage};
use ndarray::{Array5, Ix5};
use serde::{Deserialize, Serialize};
use trajguide::testbed::container::{decode_array, encode_array, write_atomic};
use trajguide::testbed::{AttentionStack, PixelVideo};

use crate::failure::{CmdResult, Failure};

#[derive(Debug, Default)]
pub struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, rel: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((rel.into(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, rel: impl Into<PathBuf>, value: &T) -> CmdResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
        text.push('\n');
        self.add(rel, text.into_bytes());
        Ok(())
    }

    /// Write everything below `root`; returns the final paths.
    pub fn commit(self, root: &Path) -> CmdResult<Vec<PathBuf>> {
        let mut written = Vec::with_capacity(self.files.len());
        for (rel, bytes) in self.files {
            let path = root.join(rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
            }
            write_atomic(&path, &bytes)
                .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn png_bytes(img: &RgbImage) -> CmdResult<Vec<u8>> {
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Failure::runtime(format!("png encoding failed: {e}")))?;
    Ok(buf)
}

/// One RGB image per frame; pixel values in `[-1, 1]` map linearly to `0..=255`.
pub fn frame_images(video: &PixelVideo) -> Vec<RgbImage> {
    let (frames, _, h, w) = video.dim();
    (0..frames)
        .map(|f| {
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let px = |c: usize| {
                    let v = (video[[f, c, y as usize, x as usize]] + 1.0) * 0.5;
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                };
                image::Rgb([px(0), px(1), px(2)])
            })
        })
        .collect()
}

/// Which denoiser call an attention entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    /// Captured during sampling at the recorded timestep.
    Step,
    /// Captured on the final latent at `t = 1` for evaluation.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub timestep: usize,
    pub source: AttentionSource,
}

/// Sidecar of `attention.bin`: one entry per leading index of the
/// `(entries, frames, tokens, height, width)` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionIndex {
    pub kind: String,
    pub shape: Vec<usize>,
    pub entries: Vec<AttentionEntry>,
}

pub fn encode_attention(stacks: &[(AttentionEntry, &AttentionStack)]) -> CmdResult<(Vec<u8>, AttentionIndex)> {
    let first = stacks.first().ok_or_else(|| Failure::runtime("no attention was captured"))?.1;
    let dims = first.maps().dim();
    if stacks.iter().any(|(_, s)| s.maps().dim() != dims) {
        return Err(Failure::runtime("captured attention stacks differ in shape"));
    }
    let shape = vec![stacks.len(), dims.0, dims.1, dims.2, dims.3];
    let bytes = encode_array(&shape, stacks.iter().flat_map(|(_, s)| s.maps().iter().copied()));
    let index = AttentionIndex {
        kind: "attention".into(),
        shape,
        entries: stacks.iter().map(|(e, _)| e.clone()).collect(),
    };
    Ok((bytes, index))
}

pub fn load_attention(path: &Path) -> CmdResult<(Array5<f64>, AttentionIndex)> {
    let bytes = std::fs::read(path).map_err(|e| Failure::reading(path, e))?;
    let arr = decode_array(&bytes).map_err(|e| Failure::reading(path, e))?;
    let side = trajguide::testbed::container::sidecar_path(path);
    let index: AttentionIndex = serde_json::from_value(crate::config::read_json(&side)?)
        .map_err(|e| Failure::reading(&side, e))?;
    let arr = arr
        .mapv(f64::from)
        .into_dimensionality::<Ix5>()
        .map_err(|_| Failure::reading(path, "attention container must have rank 5"))?;
    if arr.shape() != index.shape.as_slice() || index.entries.len() != arr.dim().0 {
        return Err(Failure::reading(&side, "sidecar does not describe the container"));
    }
    Ok((arr, index))
}
