//! Binary array container and atomic file writes.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size       field
//! 0       4          magic  b"TGAR"
//! 4       4          version (u32, = 1)
//! 8       4          rank    (u32)
//! 12      8 * rank   dims    (u64 each, outermost first)
//! ...     4 * prod   data    (f32, row-major)
//! ```
//!
//! A JSON sidecar with the same stem and a `.json` extension carries the
//! metadata (schedule, seed, tags).

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::latent::LatentVideo;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TGAR";
pub const VERSION: u32 = 1;

/// Write `bytes` to a sibling temp file, then rename it over `path`, so a
/// failed write never leaves a partial file at the final location.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn encode_array(shape: &[usize], data: impl IntoIterator<Item = f64>) -> Vec<u8> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(12 + 8 * shape.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_array(bytes: &[u8]) -> Result<ArrayD<f32>> {
    let bad = |m: &str| Error::validation(format!("array container: {m}"));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(bad(&format!("unsupported version {}", u32_at(4))));
    }
    let rank = u32_at(8) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated shape header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad(&format!("expected {} data bytes, found {}", 4 * n, bytes.len() - header)));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| bad(&e.to_string()))
}

pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    path.as_ref().with_extension("json")
}

/// Metadata written next to a latent container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSidecar {
    pub kind: String,
    pub shape: Vec<usize>,
    pub seed: u64,
    pub schedule_steps: usize,
    pub a_bar: Vec<f64>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Save a latent (as f32) plus its JSON sidecar.
pub fn save_latent(path: impl AsRef<Path>, z: &LatentVideo, sidecar: &LatentSidecar) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_array(&z.shape().dims(), z.data().iter().copied()))?;
    write_atomic(sidecar_path(path), serde_json::to_string_pretty(sidecar)?.as_bytes())
}

pub fn load_latent(path: impl AsRef<Path>) -> Result<LatentVideo> {
    let arr = decode_array(&std::fs::read(path)?)?;
    if arr.ndim() != 4 {
        return Err(Error::validation(format!("latent container has rank {}, expected 4", arr.ndim())));
    }
    let arr = arr
        .mapv(f64::from)
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| Error::Internal(e.to_string()))?;
    LatentVideo::new(arr)
}
