use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::latent::LatentVideo;
use crate::error::{Error, Result};

/// Spatial downsampling factor between pixels and latents.
pub const DOWNSAMPLE: usize = 4;

/// RGB frames laid out `(frames, 3, height, width)`, nominally in `[-1, 1]`.
pub type PixelVideo = Array4<f64>;

/// Frozen toy autoencoder: 4x4 average pooling plus a seeded orthonormal
/// RGB → latent-channel mixing; decoding inverts the mixing and upsamples
/// bilinearly. Smooth content survives the round trip.
#[derive(Debug, Clone)]
pub struct ToyAutoencoder {
    mix: Array2<f64>, // (channels, 3), orthonormal columns
}

impl ToyAutoencoder {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        if channels < 3 {
            return Err(Error::validation("toy autoencoder needs at least 3 latent channels"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ae00);
        let mut mix = Array2::from_shape_simple_fn((channels, 3), || StandardNormal.sample(&mut rng));
        // Gram-Schmidt on the columns
        for j in 0..3 {
            for i in 0..j {
                let proj: f64 = mix.column(j).dot(&mix.column(i));
                let ci = mix.column(i).to_owned();
                mix.column_mut(j).scaled_add(-proj, &ci);
            }
            let n = mix.column(j).dot(&mix.column(j)).sqrt();
            mix.column_mut(j).mapv_inplace(|v| v / n);
        }
        Ok(ToyAutoencoder { mix })
    }

    pub fn channels(&self) -> usize {
        self.mix.nrows()
    }

    pub fn encode(&self, video: &PixelVideo) -> Result<LatentVideo> {
        let (nf, nc, h, w) = video.dim();
        if nc != 3 {
            return Err(Error::validation(format!("expected 3 colour channels, got {nc}")));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::validation(format!(
                "resolution {w}x{h} is not divisible by {DOWNSAMPLE}"
            )));
        }
        let (lh, lw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
        let k = DOWNSAMPLE;
        let inv = 1.0 / (k * k) as f64;
        let mut out = Array4::zeros((nf, self.channels(), lh, lw));
        for f in 0..nf {
            for r in 0..lh {
                for c in 0..lw {
                    let mut rgb = [0.0; 3];
                    for (ch, acc) in rgb.iter_mut().enumerate() {
                        for dr in 0..k {
                            for dc in 0..k {
                                *acc += video[[f, ch, r * k + dr, c * k + dc]];
                            }
                        }
                        *acc *= inv;
                    }
                    for lc in 0..self.channels() {
                        out[[f, lc, r, c]] = (0..3).map(|ch| self.mix[[lc, ch]] * rgb[ch]).sum();
                    }
                }
            }
        }
        LatentVideo::new(out)
    }

    pub fn decode(&self, z: &LatentVideo) -> Result<PixelVideo> {
        let shape = z.shape();
        if shape.channels != self.channels() {
            return Err(Error::validation(format!(
                "latent has {} channels, autoencoder expects {}",
                shape.channels,
                self.channels()
            )));
        }
        let (lh, lw) = (shape.height, shape.width);
        let (h, w) = (lh * DOWNSAMPLE, lw * DOWNSAMPLE);
        let data = z.data();
        let mut rgb = Array4::zeros((shape.frames, 3, lh, lw));
        for f in 0..shape.frames {
            for r in 0..lh {
                for c in 0..lw {
                    for ch in 0..3 {
                        rgb[[f, ch, r, c]] =
                            (0..shape.channels).map(|lc| self.mix[[lc, ch]] * data[[f, lc, r, c]]).sum::<f64>();
                    }
                }
            }
        }
        // pixel centers map to (i + 0.5) / k − 0.5 in latent-cell coordinates
        let coord = |i: usize, n: usize| -> (usize, usize, f64) {
            let pos = ((i as f64 + 0.5) / DOWNSAMPLE as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, pos - lo as f64)
        };
        let mut out = Array4::zeros((shape.frames, 3, h, w));
        for y in 0..h {
            let (y0, y1, fy) = coord(y, lh);
            for x in 0..w {
                let (x0, x1, fx) = coord(x, lw);
                for f in 0..shape.frames {
                    for ch in 0..3 {
                        let top = rgb[[f, ch, y0, x0]] * (1.0 - fx) + rgb[[f, ch, y0, x1]] * fx;
                        let bot = rgb[[f, ch, y1, x0]] * (1.0 - fx) + rgb[[f, ch, y1, x1]] * fx;
                        out[[f, ch, y, x]] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
        Ok(out)
    }
}
