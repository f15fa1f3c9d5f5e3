//! Separable bilinear resampling of 2D patches.
//!
//! Resampling is a linear map `P -> Ry · P · Rxᵀ`; the adjoint is exposed so
//! losses that resample patches can push gradients back.

use ndarray::{Array2, ArrayView2};

/// Interpolation matrix of shape `(n_out, n_in)` with corner-aligned sampling.
pub fn interp_matrix(n_in: usize, n_out: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n_out, n_in));
    for i in 0..n_out {
        if n_in == 1 {
            m[[i, 0]] = 1.0;
            continue;
        }
        let pos = if n_out == 1 {
            (n_in - 1) as f64 / 2.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        };
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        let frac = pos - lo as f64;
        m[[i, lo]] += 1.0 - frac;
        if frac > 0.0 {
            m[[i, hi]] += frac;
        }
    }
    m
}

/// Bilinearly resample `patch` to `(out_h, out_w)`.
pub fn bilinear(patch: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = patch.dim();
    if (h, w) == (out_h, out_w) {
        return patch.to_owned();
    }
    let ry = interp_matrix(h, out_h);
    let rx = interp_matrix(w, out_w);
    ry.dot(&patch).dot(&rx.t())
}

/// Adjoint of [`bilinear`]: maps a gradient on the `(out_h, out_w)` patch back
/// to the `(in_h, in_w)` source patch.
pub fn bilinear_adjoint(grad: ArrayView2<f64>, in_h: usize, in_w: usize) -> Array2<f64> {
    let (out_h, out_w) = grad.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return grad.to_owned();
    }
    let ry = interp_matrix(in_h, out_h);
    let rx = interp_matrix(in_w, out_w);
    ry.t().dot(&grad).dot(&rx)
}
