use ndarray::{Array4, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        LatentShape { frames, channels, height, width }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The denoising state, laid out as `(frames, channels, height, width)`.
/// Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    data: Array4<f64>,
}

impl LatentVideo {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "latent contains a non-finite value at flat index {pos}"
            )));
        }
        Ok(LatentVideo { data })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        LatentVideo { data: Array4::zeros(shape.dims()) }
    }

    /// Standard normal draw; a pure function of `(shape, seed)`.
    pub fn gaussian(shape: LatentShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array4::from_shape_simple_fn(shape.dims(), || StandardNormal.sample(&mut rng));
        LatentVideo { data }
    }

    pub fn shape(&self) -> LatentShape {
        let (f, c, h, w) = self.data.dim();
        LatentShape::new(f, c, h, w)
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }

    pub fn expect_shape(&self, other: &LatentVideo) -> Result<()> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::Shape {
                expected: self.data.shape().to_vec(),
                got: other.data.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub(crate) fn affine(&self, a: f64, other: &LatentVideo, b: f64) -> LatentVideo {
        let mut out = Array4::zeros(self.data.raw_dim());
        Zip::from(&mut out)
            .and(&self.data)
            .and(&other.data)
            .for_each(|o, &x, &y| *o = a * x + b * y);
        LatentVideo { data: out }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖ / ‖other‖`.
    pub fn relative_error(&self, other: &LatentVideo) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        diff / other.l2_norm().max(f64::MIN_POSITIVE)
    }

    pub fn bit_eq(&self, other: &LatentVideo) -> bool {
        self.data.shape() == other.data.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
