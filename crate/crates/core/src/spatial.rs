//! Spatial constraints on cross-attention maps and the latent update they drive.
//!
//! For a target token `k` and frame `f` with box mask `M`:
//!
//! * inside loss  `L_i = 1 − mean(top_P(A ⊙ M))`
//! * outside loss `L_o = mean(top_P(A ⊙ (1 − M)))`
//! * center loss  `L_c = ‖box_center − centroid(A)‖₁` (grid-cell units)
//! * similarity   `L_s = 1 − mean_f cos(Pix(A^f, B^f), Pix(A^{f+1}, B^{f+1}))`
//!
//! combined as `L_sp = Σ_f (λ_i L_i + λ_o L_o + λ_c L_c) + λ_s L_s`. Every loss
//! has an analytic gradient with respect to the attention map; the backend
//! carries it the rest of the way to `z_t`.

use ndarray::{s, Array2, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::DiffusionBackend;
use crate::resample;
use crate::testbed::{AttentionStack, LatentVideo, PromptSpec};
use crate::trajectory::{build_mask, BoxTrajectory, GridBox, Mask};

/// Side of the canonical patch used when box shapes differ between frames.
pub const CANONICAL_PATCH: usize = 8;

/// How many top values the inside/outside losses average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopP {
    /// `max(1, round(fraction · box area))`.
    Fraction(f64),
    Fixed(usize),
}

impl TopP {
    pub fn resolve(&self, box_area: usize) -> usize {
        match *self {
            TopP::Fraction(f) => ((f * box_area as f64).round() as usize).max(1),
            TopP::Fixed(p) => p.max(1),
        }
    }
}

/// Scaling of the gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// `z ← z − β ∇L`
    Raw,
    /// `z ← z − β ∇L / (‖∇L‖ + 1e-8)`
    Normalized,
    /// `z ← z − β ∇L / (rms(∇L) + 1e-12)`: `β` is the RMS displacement per
    /// latent element, independent of latent size and gradient scale.
    Rms,
}

/// Guidance hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub lambda_i: f64,
    pub lambda_o: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    /// Mixup ratio of the noise prior.
    pub lambda_p: f64,
    pub top_p: TopP,
    /// Total denoising steps `T`.
    pub total_steps: usize,
    /// Guided steps `T1` at the start of sampling.
    pub t1: usize,
    /// Plain steps `T2`.
    pub t2: usize,
    /// Step-size at the first guided step; decays linearly to 0 over `T1`.
    pub beta0: f64,
    pub step_mode: StepMode,
    pub inner_iters: usize,
    /// Steps with shifted temporal attention; defaults to `T1`.
    pub stam_steps: Option<usize>,
    /// Decode and re-encode the meta video before inversion.
    pub meta_pixel_roundtrip: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda_i: 1.0,
            lambda_o: 1.0,
            lambda_c: 0.05,
            lambda_s: 0.5,
            lambda_p: 0.8,
            top_p: TopP::Fraction(0.2),
            total_steps: 30,
            t1: 10,
            t2: 20,
            beta0: 0.1,
            step_mode: StepMode::Rms,
            inner_iters: 1,
            stam_steps: None,
            meta_pixel_roundtrip: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_i", self.lambda_i),
            ("lambda_o", self.lambda_o),
            ("lambda_c", self.lambda_c),
            ("lambda_s", self.lambda_s),
        ];
        for (name, v) in lambdas {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!("guidance.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_p) {
            return Err(Error::validation(format!(
                "guidance.lambda_p must lie in [0, 1], got {}",
                self.lambda_p
            )));
        }
        if self.t1 + self.t2 != self.total_steps {
            return Err(Error::validation(format!(
                "guidance.t1 ({}) + guidance.t2 ({}) must equal guidance.total_steps ({})",
                self.t1, self.t2, self.total_steps
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::validation("guidance.total_steps must be positive"));
        }
        // beta0 = 0 is accepted: it turns the update into the identity.
        if !(self.beta0.is_finite() && self.beta0 >= 0.0) {
            return Err(Error::validation(format!("guidance.beta0 must be >= 0, got {}", self.beta0)));
        }
        if self.inner_iters == 0 {
            return Err(Error::validation("guidance.inner_iters must be at least 1"));
        }
        match self.top_p {
            TopP::Fraction(f) if !(f.is_finite() && f > 0.0) => {
                return Err(Error::validation("guidance.top_p fraction must be positive"));
            }
            TopP::Fixed(0) => return Err(Error::validation("guidance.top_p must be at least 1")),
            _ => {}
        }
        if self.stam_window() > self.total_steps {
            return Err(Error::validation("guidance.stam_steps exceeds total_steps"));
        }
        Ok(())
    }

    pub fn stam_window(&self) -> usize {
        self.stam_steps.unwrap_or(self.t1)
    }

    /// Step size at guided iteration `index` (0-based): `β0 · (T1 − index) / T1`.
    pub fn beta_at(&self, index: usize) -> f64 {
        if self.t1 == 0 || index >= self.t1 {
            return 0.0;
        }
        self.beta0 * (self.t1 - index) as f64 / self.t1 as f64
    }

    pub fn all_weights_zero(&self) -> bool {
        self.lambda_i == 0.0 && self.lambda_o == 0.0 && self.lambda_c == 0.0 && self.lambda_s == 0.0
    }
}

/// Per-frame components (averaged over target tokens) and the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_inside: Vec<f64>,
    pub l_outside: Vec<f64>,
    pub l_center: Vec<f64>,
    pub l_sim: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recompose the weighted total from the components.
    pub fn recompose(&self, cfg: &GuidanceConfig) -> f64 {
        let frames: f64 = (0..self.l_inside.len())
            .map(|f| {
                cfg.lambda_i * self.l_inside[f]
                    + cfg.lambda_o * self.l_outside[f]
                    + cfg.lambda_c * self.l_center[f]
            })
            .sum();
        frames + cfg.lambda_s * self.l_sim
    }
}

/// Indices of the `p` largest values, ties broken by lower index.
fn top_p_indices(values: &[f64], p: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(p.min(values.len()));
    idx
}

/// Mean of the `p` largest entries; when `p` exceeds the length every entry
/// is used.
pub fn top_p_mean(values: &[f64], p: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("top-P mean of an empty array"));
    }
    if p == 0 {
        return Err(Error::validation("P must be at least 1"));
    }
    let idx = top_p_indices(values, p);
    Ok(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
}

fn check_same_shape(map: ArrayView2<f64>, mask: &Mask) -> Result<()> {
    if map.dim() != mask.shape() {
        let (a, b) = map.dim();
        let (c, d) = mask.shape();
        return Err(Error::Shape { expected: vec![c, d], got: vec![a, b] });
    }
    Ok(())
}

/// Top-P mean of `map ⊙ weight` and its gradient w.r.t. `map`.
fn masked_top_p(map: ArrayView2<f64>, weight: &Array2<f64>, p: usize) -> (f64, Array2<f64>) {
    let masked: Vec<f64> = map.iter().zip(weight.iter()).map(|(a, m)| a * m).collect();
    let idx = top_p_indices(&masked, p);
    let n = idx.len() as f64;
    let value = idx.iter().map(|&i| masked[i]).sum::<f64>() / n;
    let mut grad = Array2::zeros(map.raw_dim());
    let cols = map.ncols();
    for i in idx {
        grad[[i / cols, i % cols]] = weight[[i / cols, i % cols]] / n;
    }
    (value, grad)
}

pub fn loss_inside_with_grad(map: ArrayView2<f64>, mask: &Mask, p: usize) -> Result<(f64, Array2<f64>)> {
    check_same_shape(map, mask)?;
    if mask.ones() == 0 {
        return Err(Error::validation("inside loss needs a non-empty box mask"));
    }
    let (mean, grad) = masked_top_p(map, &mask.grid, p.max(1));
    Ok((1.0 - mean, -grad))
}

/// `1 − mean(top_P(A ⊙ M))`.
pub fn loss_inside(map: ArrayView2<f64>, mask: &Mask, p: usize) -> Result<f64> {
    loss_inside_with_grad(map, mask, p).map(|(v, _)| v)
}

pub fn loss_outside_with_grad(map: ArrayView2<f64>, mask: &Mask, p: usize) -> Result<(f64, Array2<f64>)> {
    check_same_shape(map, mask)?;
    if mask.ones() == mask.grid.len() {
        log::warn!("outside loss on a full-frame box: complement is empty, loss is 0");
        return Ok((0.0, Array2::zeros(map.raw_dim())));
    }
    let complement = mask.grid.mapv(|m| 1.0 - m);
    Ok(masked_top_p(map, &complement, p.max(1)))
}

/// `mean(top_P(A ⊙ (1 − M)))`.
pub fn loss_outside(map: ArrayView2<f64>, mask: &Mask, p: usize) -> Result<f64> {
    loss_outside_with_grad(map, mask, p).map(|(v, _)| v)
}

/// Attention-weighted mean `(column, row)` position.
pub fn attention_centroid(map: ArrayView2<f64>) -> Result<(f64, f64)> {
    let total = map.sum();
    if !(total > 0.0) {
        return Err(Error::validation("centroid of an attention map with zero mass"));
    }
    let mut cw = 0.0;
    let mut ch = 0.0;
    for ((r, c), &a) in map.indexed_iter() {
        cw += c as f64 * a;
        ch += r as f64 * a;
    }
    Ok((cw / total, ch / total))
}

pub fn loss_center_with_grad(map: ArrayView2<f64>, gbox: &GridBox) -> Result<(f64, Array2<f64>)> {
    let (cw, ch) = attention_centroid(map)?;
    let (bx, by) = gbox.center();
    let value = (bx - cw).abs() + (by - ch).abs();
    let total = map.sum();
    let (sw, sh) = (sign(cw - bx), sign(ch - by));
    let grad = Array2::from_shape_fn(map.raw_dim(), |(r, c)| {
        (sw * (c as f64 - cw) + sh * (r as f64 - ch)) / total
    });
    Ok((value, grad))
}

/// L1 distance between the box center and the attention centroid, both in
/// cell-index coordinates.
pub fn loss_center(map: ArrayView2<f64>, gbox: &GridBox) -> Result<f64> {
    loss_center_with_grad(map, gbox).map(|(v, _)| v)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cosine similarity and its gradients w.r.t. both arguments. A zero-norm
/// argument yields similarity 0 with zero gradients.
fn cosine_with_grad(a: &Array2<f64>, b: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("zero-norm attention patch in similarity loss; pair similarity set to 0");
        return (0.0, Array2::zeros(a.raw_dim()), Array2::zeros(b.raw_dim()));
    }
    let dot = (a * b).sum();
    let cos = dot / (na * nb);
    let ga = b / (na * nb) - a * (cos / (na * na));
    let gb = a / (na * nb) - b * (cos / (nb * nb));
    (cos, ga, gb)
}

/// Similarity loss over per-frame maps with their grid boxes, plus the
/// gradient w.r.t. each map. Patches of unequal shape are bilinearly
/// resampled to a canonical `8x8` patch.
pub fn loss_similarity_maps(maps: &[ArrayView2<f64>], boxes: &[GridBox]) -> Result<(f64, Vec<Array2<f64>>)> {
    if maps.len() != boxes.len() {
        return Err(Error::validation(format!(
            "{} maps but {} boxes",
            maps.len(),
            boxes.len()
        )));
    }
    if maps.len() < 2 {
        return Err(Error::validation("similarity loss needs at least 2 frames"));
    }
    for (m, b) in maps.iter().zip(boxes) {
        let (h, w) = m.dim();
        if !b.fits(w, h) {
            return Err(Error::validation(format!("box {b:?} does not fit a {w}x{h} map")));
        }
    }
    let same_shape = boxes.iter().all(|b| (b.height(), b.width()) == (boxes[0].height(), boxes[0].width()));
    let patches: Vec<Array2<f64>> = maps
        .iter()
        .zip(boxes)
        .map(|(m, b)| {
            let raw = m.slice(s![b.row_lo..b.row_hi, b.col_lo..b.col_hi]);
            if same_shape {
                raw.to_owned()
            } else {
                resample::bilinear(raw, CANONICAL_PATCH, CANONICAL_PATCH)
            }
        })
        .collect();
    let pairs = (maps.len() - 1) as f64;
    let mut patch_grads: Vec<Array2<f64>> = patches.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
    let mut sim = 0.0;
    for f in 0..patches.len() - 1 {
        let (c, ga, gb) = cosine_with_grad(&patches[f], &patches[f + 1]);
        sim += c;
        patch_grads[f] -= &(ga / pairs);
        patch_grads[f + 1] -= &(gb / pairs);
    }
    let value = 1.0 - sim / pairs;
    let grads = maps
        .iter()
        .zip(boxes)
        .zip(patch_grads)
        .map(|((m, b), g)| {
            let mut full = Array2::zeros(m.raw_dim());
            let local = if same_shape { g } else { resample::bilinear_adjoint(g.view(), b.height(), b.width()) };
            full.slice_mut(s![b.row_lo..b.row_hi, b.col_lo..b.col_hi]).assign(&local);
            full
        })
        .collect();
    Ok((value, grads))
}

/// `1 − mean cosine similarity` of token `k`'s in-box patches in consecutive frames.
pub fn loss_similarity(attn: &AttentionStack, traj: &BoxTrajectory, token: usize) -> Result<f64> {
    let (h, w) = attn.resolution();
    traj.expect_frames(attn.n_frames())?;
    if token >= attn.n_tokens() {
        return Err(Error::validation(format!("token {token} out of range")));
    }
    let boxes = traj.quantize(w, h);
    let maps: Vec<_> = (0..attn.n_frames()).map(|f| attn.map(f, token)).collect();
    loss_similarity_maps(&maps, &boxes).map(|(v, _)| v)
}

/// Weighted spatial loss and its gradient w.r.t. every captured map
/// (`(F, N_p, h, w)`, zero for non-target tokens).
pub fn spatial_loss_with_grad(
    attn: &AttentionStack,
    traj: &BoxTrajectory,
    cfg: &GuidanceConfig,
    tokens: &[usize],
) -> Result<(LossBreakdown, Array4<f64>)> {
    let nf = attn.n_frames();
    let (h, w) = attn.resolution();
    traj.expect_frames(nf)?;
    if tokens.is_empty() {
        return Err(Error::validation("no target tokens"));
    }
    if let Some(bad) = tokens.iter().find(|&&k| k >= attn.n_tokens()) {
        return Err(Error::validation(format!(
            "no attention map for token {bad} (stack has {} tokens)",
            attn.n_tokens()
        )));
    }
    let boxes = traj.quantize(w, h);
    let masks = boxes.iter().map(|b| build_mask(*b, w, h)).collect::<Result<Vec<_>>>()?;
    let nt = tokens.len() as f64;
    let mut grad = Array4::zeros(attn.maps().raw_dim());
    let mut out = LossBreakdown {
        l_inside: vec![0.0; nf],
        l_outside: vec![0.0; nf],
        l_center: vec![0.0; nf],
        l_sim: 0.0,
        total: 0.0,
    };
    for &k in tokens {
        for f in 0..nf {
            let map = attn.map(f, k);
            let p = cfg.top_p.resolve(boxes[f].area());
            let (li, gi) = loss_inside_with_grad(map, &masks[f], p)?;
            let (lo, go) = loss_outside_with_grad(map, &masks[f], p)?;
            let (lc, gc) = loss_center_with_grad(map, &boxes[f])?;
            out.l_inside[f] += li / nt;
            out.l_outside[f] += lo / nt;
            out.l_center[f] += lc / nt;
            let g = gi * (cfg.lambda_i / nt) + go * (cfg.lambda_o / nt) + gc * (cfg.lambda_c / nt);
            let mut slot = grad.slice_mut(s![f, k, .., ..]);
            slot += &g;
        }
        if nf >= 2 {
            let maps: Vec<_> = (0..nf).map(|f| attn.map(f, k)).collect();
            let (ls, gs) = loss_similarity_maps(&maps, &boxes)?;
            out.l_sim += ls / nt;
            for (f, g) in gs.into_iter().enumerate() {
                let mut slot = grad.slice_mut(s![f, k, .., ..]);
                slot.scaled_add(cfg.lambda_s / nt, &g);
            }
        }
    }
    out.total = out.recompose(cfg);
    Ok((out, grad))
}

/// `L_sp` and its components for the given target tokens.
pub fn total_spatial_loss(
    attn: &AttentionStack,
    traj: &BoxTrajectory,
    cfg: &GuidanceConfig,
    tokens: &[usize],
) -> Result<LossBreakdown> {
    spatial_loss_with_grad(attn, traj, cfg, tokens).map(|(l, _)| l)
}

/// Fraction of `(frame, token)` pairs whose attention argmax lies in the box.
pub fn argmax_in_box_fraction(attn: &AttentionStack, traj: &BoxTrajectory, tokens: &[usize]) -> f64 {
    let (h, w) = attn.resolution();
    let boxes = traj.quantize(w, h);
    let mut hits = 0usize;
    let mut total = 0usize;
    for &k in tokens {
        for (f, b) in boxes.iter().enumerate().take(attn.n_frames()) {
            let map = attn.map(f, k);
            let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
            for ((r, c), &v) in map.indexed_iter() {
                if v > best {
                    best = v;
                    at = (r, c);
                }
            }
            hits += b.contains(at.0, at.1) as usize;
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// One gradient update of a guided step, as written to the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceLog {
    pub timestep: usize,
    pub guided_index: usize,
    pub inner_iter: usize,
    pub beta: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    pub argmax_in_box: f64,
    pub loss: LossBreakdown,
}

/// Apply the gradient update `z ← z − β_t ∇L_sp` (`inner_iters` times) at
/// guided iteration `guided_index`, timestep `t`.
///
/// Gradients flow only through a dedicated attention-capture pass; the
/// caller denoises the returned latent afresh. Non-finite gradients skip the
/// update and are logged.
pub fn guide_latent<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z_t: &LatentVideo,
    t: usize,
    guided_index: usize,
    prompt: &PromptSpec,
    traj: &BoxTrajectory,
    cfg: &GuidanceConfig,
) -> Result<(LatentVideo, Vec<GuidanceLog>)> {
    if !backend.supports_gradients() {
        return Err(Error::Capability(format!(
            "backend '{}' cannot differentiate attention maps",
            backend.name()
        )));
    }
    traj.expect_frames(z_t.n_frames())?;
    let beta = cfg.beta_at(guided_index);
    let mut z = z_t.clone();
    let mut logs = Vec::with_capacity(cfg.inner_iters);
    for inner in 0..cfg.inner_iters {
        let (stack, vjp) = backend.attention_with_grad(&z, t, prompt)?;
        let (loss, dmaps) = spatial_loss_with_grad(&stack, traj, cfg, &prompt.target_indices)?;
        let argmax_in_box = argmax_in_box_fraction(&stack, traj, &prompt.target_indices);
        let grad = vjp(&dmaps);
        let (grad, finite) = match grad {
            Ok(g) => (Some(g), true),
            Err(Error::Validation(_)) => (None, false),
            Err(e) => return Err(e),
        };
        let grad_norm = grad.as_ref().map(LatentVideo::l2_norm).unwrap_or(f64::NAN);
        let skipped = !finite || !grad_norm.is_finite();
        if skipped {
            log::warn!("non-finite spatial-loss gradient at t={t}; update skipped");
        } else if let Some(g) = grad {
            let scale = match cfg.step_mode {
                StepMode::Raw => beta,
                StepMode::Normalized => beta / (grad_norm + 1e-8),
                StepMode::Rms => beta / (grad_norm / (g.data().len() as f64).sqrt() + 1e-12),
            };
            z = z.affine(1.0, &g, -scale);
        }
        logs.push(GuidanceLog {
            timestep: t,
            guided_index,
            inner_iter: inner,
            beta,
            grad_norm,
            skipped,
            argmax_in_box,
            loss,
        });
    }
    Ok((z, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn top_p_examples() {
        assert_eq!(top_p_mean(&[0.1, 0.9, 0.5], 1).unwrap(), 0.9);
        assert!((top_p_mean(&[0.1, 0.9, 0.5], 3).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(top_p_mean(&[0.5, 0.5, 0.1], 1).unwrap(), 0.5);
        assert_eq!(top_p_mean(&[0.1, 0.5, 0.5], 1).unwrap(), 0.5);
        assert!((top_p_mean(&[0.2, 0.4], 10).unwrap() - 0.3).abs() < 1e-15);
        assert!(top_p_mean(&[], 1).is_err());
    }

    #[test]
    fn top_p_rule() {
        assert_eq!(TopP::Fraction(0.2).resolve(144), 29);
        assert_eq!(TopP::Fraction(0.2).resolve(1), 1);
        assert_eq!(TopP::Fixed(4).resolve(1), 4);
    }

    fn mask_2x2() -> Mask {
        build_mask(GridBox::new(1, 1, 3, 3), 4, 4).unwrap()
    }

    fn fixture() -> Array2<f64> {
        array![
            [0.05, 0.10, 0.20, 0.01],
            [0.30, 0.70, 0.40, 0.02],
            [0.15, 0.60, 0.50, 0.03],
            [0.25, 0.08, 0.35, 0.04]
        ]
    }

    #[test]
    fn inside_loss_cases() {
        let m = mask_2x2();
        let ones = Array2::from_elem((4, 4), 1.0);
        assert_eq!(loss_inside(ones.view(), &m, 2).unwrap(), 0.0);
        let zeros = Array2::<f64>::zeros((4, 4));
        assert_eq!(loss_inside(zeros.view(), &m, 2).unwrap(), 1.0);
        // in-box values 0.7, 0.4, 0.6, 0.5 -> top 2 = 0.7, 0.6
        let v = loss_inside(fixture().view(), &m, 2).unwrap();
        assert!((v - (1.0 - 0.65)).abs() < 1e-12);
        let empty = Mask { grid: Array2::zeros((4, 4)), gbox: GridBox::new(0, 0, 1, 1) };
        assert!(loss_inside(fixture().view(), &empty, 2).is_err());
    }

    #[test]
    fn outside_loss_cases() {
        let m = mask_2x2();
        let mut a = Array2::<f64>::zeros((4, 4));
        a[[1, 1]] = 0.9;
        assert_eq!(loss_outside(a.view(), &m, 3).unwrap(), 0.0);
        let ones = Array2::from_elem((4, 4), 1.0);
        assert_eq!(loss_outside(ones.view(), &m, 5).unwrap(), 1.0);
        // complement maxima: 0.35, 0.30, 0.25
        let v = loss_outside(fixture().view(), &m, 3).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        let full = build_mask(GridBox::new(0, 0, 4, 4), 4, 4).unwrap();
        assert_eq!(loss_outside(fixture().view(), &full, 3).unwrap(), 0.0);
    }

    #[test]
    fn centroid_cases() {
        let mut a = Array2::<f64>::zeros((10, 12));
        a[[7, 5]] = 2.0;
        assert_eq!(attention_centroid(a.view()).unwrap(), (5.0, 7.0));
        let u = Array2::from_elem((6, 9), 0.3);
        let (cw, ch) = attention_centroid(u.view()).unwrap();
        assert!((cw - 4.0).abs() < 1e-12 && (ch - 2.5).abs() < 1e-12);
        let mut two = Array2::<f64>::zeros((3, 11));
        two[[0, 0]] = 1.0;
        two[[0, 10]] = 1.0;
        assert_eq!(attention_centroid(two.view()).unwrap(), (5.0, 0.0));
        assert!(attention_centroid(Array2::<f64>::zeros((2, 2)).view()).is_err());
    }

    #[test]
    fn center_loss_cases() {
        let g = GridBox::new(2, 2, 5, 5); // center (3, 3)
        let mut a = Array2::<f64>::zeros((8, 8));
        a[[3, 3]] = 1.0;
        assert_eq!(loss_center(a.view(), &g).unwrap(), 0.0);
        let mut b = Array2::<f64>::zeros((8, 8));
        b[[3, 6]] = 1.0;
        assert_eq!(loss_center(b.view(), &g).unwrap(), 3.0);
        // spikes (w=0,h=0) weight 1 and (w=6,h=4) weight 3 -> centroid (4.5, 3)
        let mut c = Array2::<f64>::zeros((8, 8));
        c[[0, 0]] = 1.0;
        c[[4, 6]] = 3.0;
        assert!((loss_center(c.view(), &g).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn similarity_cases() {
        let m = fixture();
        let boxes = vec![GridBox::new(1, 1, 3, 3); 3];
        let maps = vec![m.view(), m.view(), m.view()];
        let (v, _) = loss_similarity_maps(&maps, &boxes).unwrap();
        assert!(v.abs() < 1e-12);

        let neg = -&m;
        let (v, _) = loss_similarity_maps(&[m.view(), neg.view()], &boxes[..2]).unwrap();
        assert!((v - 2.0).abs() < 1e-12);

        // three frames with 2x2 patches at different positions
        let p = [array![[1.0, 2.0], [3.0, 4.0]], array![[2.0, 1.0], [0.5, 1.0]], array![[0.0, 1.0], [1.0, 0.0]]];
        let bx = [GridBox::new(0, 0, 2, 2), GridBox::new(2, 1, 4, 3), GridBox::new(1, 2, 3, 4)];
        let mut full = Vec::new();
        for (patch, b) in p.iter().zip(&bx) {
            let mut a = Array2::<f64>::zeros((4, 4));
            a.slice_mut(s![b.row_lo..b.row_hi, b.col_lo..b.col_hi]).assign(patch);
            full.push(a);
        }
        let views: Vec<_> = full.iter().map(|a| a.view()).collect();
        let (v, _) = loss_similarity_maps(&views, &bx).unwrap();
        let cos = |a: &Array2<f64>, b: &Array2<f64>| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let expect = 1.0 - (cos(&p[0], &p[1]) + cos(&p[1], &p[2])) / 2.0;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn similarity_zero_patch_counts_as_orthogonal() {
        let a = fixture();
        let z = Array2::<f64>::zeros((4, 4));
        let boxes = vec![GridBox::new(1, 1, 3, 3); 2];
        let (v, g) = loss_similarity_maps(&[a.view(), z.view()], &boxes).unwrap();
        assert_eq!(v, 1.0);
        assert!(g.iter().all(|m| m.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn similarity_resamples_unequal_boxes() {
        let a = Array2::from_elem((6, 6), 0.5);
        let boxes = [GridBox::new(0, 0, 2, 2), GridBox::new(1, 1, 4, 5)];
        let (v, g) = loss_similarity_maps(&[a.view(), a.view()], &boxes).unwrap();
        assert!(v.abs() < 1e-12);
        assert_eq!(g[1].dim(), (6, 6));
    }

    fn two_frame_stack() -> (AttentionStack, BoxTrajectory) {
        let mut maps = Array4::<f64>::zeros((2, 2, 4, 4));
        maps.slice_mut(s![0, 0, .., ..]).assign(&fixture());
        maps.slice_mut(s![1, 0, .., ..]).assign(&fixture().t());
        maps.slice_mut(s![.., 1, .., ..]).fill(0.2);
        let traj = BoxTrajectory::new(vec![
            crate::trajectory::BBox::new(0.25, 0.25, 0.75, 0.75).unwrap(),
            crate::trajectory::BBox::new(0.0, 0.5, 0.5, 1.0).unwrap(),
        ])
        .unwrap();
        (AttentionStack::new(maps, 1), traj)
    }

    #[test]
    fn total_loss_zero_weights() {
        let (stack, traj) = two_frame_stack();
        let cfg = GuidanceConfig { lambda_i: 0.0, lambda_o: 0.0, lambda_c: 0.0, lambda_s: 0.0, ..Default::default() };
        assert_eq!(total_spatial_loss(&stack, &traj, &cfg, &[0]).unwrap().total, 0.0);
    }

    #[test]
    fn total_loss_default_weights_recompose() {
        let (stack, traj) = two_frame_stack();
        let cfg = GuidanceConfig::default();
        let l = total_spatial_loss(&stack, &traj, &cfg, &[0]).unwrap();
        // component oracles evaluated independently
        let boxes = traj.quantize(4, 4);
        let mut expect = 0.0;
        for f in 0..2 {
            let map = stack.map(f, 0);
            let mask = build_mask(boxes[f], 4, 4).unwrap();
            let p = cfg.top_p.resolve(boxes[f].area());
            expect += 1.0 * loss_inside(map, &mask, p).unwrap()
                + 1.0 * loss_outside(map, &mask, p).unwrap()
                + 0.05 * loss_center(map, &boxes[f]).unwrap();
        }
        expect += 0.5 * loss_similarity(&stack, &traj, 0).unwrap();
        assert!((l.total - expect).abs() < 1e-12);
        assert!((l.total - l.recompose(&cfg)).abs() < 1e-9);
        assert!(total_spatial_loss(&stack, &traj, &cfg, &[5]).is_err());
    }

    #[test]
    fn config_validation() {
        GuidanceConfig::default().validate().unwrap();
        assert!(GuidanceConfig { t1: 5, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { lambda_c: -1.0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { inner_iters: 0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { lambda_p: 1.5, ..Default::default() }.validate().is_err());
        let c = GuidanceConfig::default();
        assert_eq!(c.beta_at(0), 0.1);
        assert!((c.beta_at(9) - 0.01).abs() < 1e-15);
        assert_eq!(c.beta_at(10), 0.0);
    }
}
