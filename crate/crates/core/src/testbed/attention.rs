use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};

use super::latent::LatentVideo;
use crate::error::{Error, Result};

/// In-place numerically stable softmax over each row.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `Softmax(Q Kᵀ / sqrt(d))`: one row per query, one column per key.
pub fn cross_attention_map(q: ArrayView2<f64>, k: ArrayView2<f64>, d: f64) -> Result<Array2<f64>> {
    if d <= 0.0 || d.is_nan() {
        return Err(Error::validation(format!("key dimension must be positive, got {d}")));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::Shape { expected: vec![q.ncols()], got: vec![k.ncols()] });
    }
    let mut logits = q.dot(&k.t()) / d.sqrt();
    softmax_rows(&mut logits);
    Ok(logits)
}

/// Rearrange a batch of videos for temporal attention:
/// `out[b·H·W + h·W + w, f, c] = z_b[f, c, h, w]`.
pub fn temporal_rearrange_batch(batch: &[&Array4<f64>]) -> Result<Array3<f64>> {
    let Some(first) = batch.first() else {
        return Err(Error::validation("empty batch"));
    };
    let (nf, nc, nh, nw) = first.dim();
    let mut out = Array3::zeros((batch.len() * nh * nw, nf, nc));
    for (b, z) in batch.iter().enumerate() {
        if z.dim() != (nf, nc, nh, nw) {
            return Err(Error::Shape { expected: first.shape().to_vec(), got: z.shape().to_vec() });
        }
        for ((f, c, h, w), &v) in z.indexed_iter() {
            out[[b * nh * nw + h * nw + w, f, c]] = v;
        }
    }
    Ok(out)
}

/// Inverse of [`temporal_rearrange_batch`] for `n_batch` videos of spatial
/// size `height x width`.
pub fn temporal_restore_batch(
    rows: &Array3<f64>,
    n_batch: usize,
    height: usize,
    width: usize,
) -> Result<Vec<Array4<f64>>> {
    let (n, nf, nc) = rows.dim();
    if n != n_batch * height * width {
        return Err(Error::Shape { expected: vec![n_batch * height * width], got: vec![n] });
    }
    let mut out = vec![Array4::zeros((nf, nc, height, width)); n_batch];
    for ((row, f, c), &v) in rows.indexed_iter() {
        let b = row / (height * width);
        let rem = row % (height * width);
        out[b][[f, c, rem / width, rem % width]] = v;
    }
    Ok(out)
}

/// Single-video form of [`temporal_rearrange_batch`]: `(H·W, F, C)`.
pub fn temporal_rearrange(z: &Array4<f64>) -> Array3<f64> {
    temporal_rearrange_batch(&[z]).expect("single video")
}

pub fn temporal_restore(rows: &Array3<f64>, height: usize, width: usize) -> Result<Array4<f64>> {
    Ok(temporal_restore_batch(rows, 1, height, width)?.remove(0))
}

impl LatentVideo {
    pub fn temporal_rows(&self) -> Array3<f64> {
        temporal_rearrange(self.data())
    }
}

/// Cross-attention maps captured from one denoiser pass, averaged over heads
/// and over every cross-attention layer, resampled to the capture resolution.
///
/// `maps[[f, k, row, col]]` is the attention of the query at `(row, col)` of
/// frame `f` on token `k`. Maps are owned copies.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    maps: Array4<f64>,
    timestep: usize,
}

impl AttentionStack {
    pub fn new(maps: Array4<f64>, timestep: usize) -> Self {
        AttentionStack { maps, timestep }
    }

    pub fn maps(&self) -> &Array4<f64> {
        &self.maps
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn n_frames(&self) -> usize {
        self.maps.dim().0
    }

    pub fn n_tokens(&self) -> usize {
        self.maps.dim().1
    }

    /// `(height, width)` of each map.
    pub fn resolution(&self) -> (usize, usize) {
        let (_, _, h, w) = self.maps.dim();
        (h, w)
    }

    pub fn map(&self, frame: usize, token: usize) -> ArrayView2<'_, f64> {
        self.maps.index_axis(Axis(0), frame).index_axis_move(Axis(0), token)
    }

    /// Largest deviation from 1 of any per-location softmax row.
    pub fn max_row_sum_error(&self) -> f64 {
        let sums = self.maps.sum_axis(Axis(1));
        sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }
}
