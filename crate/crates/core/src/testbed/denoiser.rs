//! Toy 3D denoiser with spatial cross-attention and temporal attention.
//!
//! Architecture, per resolution level `ℓ` (spatial size `H/2^ℓ`):
//!
//! ```text
//! down:  x_ℓ = avgpool_{2^ℓ}(z_t)
//!        h_ℓ = tanh(conv3x3(x_ℓ) + b + temb(t))
//!        u_ℓ = h_ℓ + CrossAttention(h_ℓ, prompt)        (spatial transformer)
//!        w_ℓ = TemporalAttention(u_ℓ)                   (temporal transformer)
//! up:    y_L-1 = w_L-1,   y_ℓ = tanh(w_ℓ S + upsample(y_ℓ+1) U)
//! latent: m = TemporalAttention(z_t)                   (parameter-free)
//! out:   ε = sqrt(1 − ā_t) (z_t − κ (m − z_t)) + s · y_0 W_out
//! ```
//!
//! `sqrt(1 − ā_t) z_t` is the exact noise predictor for unit-Gaussian data,
//! which keeps DDIM trajectories well conditioned. The `κ` term pulls the
//! predicted clean latent toward content shared across frames at the same
//! position, the temporal redundancy a video prior exploits; it is strongest
//! at high noise. The network adds a structured, prompt-dependent residual.
//!
//! Captured attention maps are the head-averaged maps of the capture level
//! and every coarser level, nearest-upsampled to the capture grid and averaged.
//!
//! Because each level's queries depend on `z_t` only through the stem
//! (pool, conv, tanh), the attention maps have a cheap hand-written
//! vector-Jacobian product; see [`ToyDenoiser::attention_vjp`].

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::attention::{softmax_rows, temporal_rearrange, temporal_restore, AttentionStack};
use super::latent::{LatentShape, LatentVideo};
use super::schedule::{make_schedule, NoiseSchedule};
use super::text::PromptSpec;
use crate::error::{Error, Result};

const TIME_FREQS: usize = 4;

/// Architecture and seed of the toy backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestbedConfig {
    pub seed: u64,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Sampling steps `T`.
    pub steps: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    /// Context length `N_p`.
    pub max_tokens: usize,
    pub max_levels: usize,
    /// Preferred side length of captured attention maps.
    pub capture_size: usize,
    pub query_gain: f64,
    pub temporal_gain: f64,
    pub time_gain: f64,
    /// Scale `s` of the network residual in the noise prediction.
    pub residual_scale: f64,
    /// Weight `κ` of the latent temporal-consistency term.
    pub latent_temporal_gain: f64,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        TestbedConfig {
            seed: 7,
            frames: 8,
            channels: 4,
            height: 48,
            width: 48,
            steps: 30,
            hidden: 16,
            heads: 2,
            head_dim: 8,
            embed_dim: 16,
            vocab_size: 64,
            max_tokens: 8,
            max_levels: 3,
            capture_size: 48,
            query_gain: 3.0,
            temporal_gain: 1.0,
            time_gain: 0.3,
            residual_scale: 0.3,
            latent_temporal_gain: 1.0,
        }
    }
}

impl TestbedConfig {
    pub fn latent_shape(&self) -> LatentShape {
        LatentShape::new(self.frames, self.channels, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("steps", self.steps),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("embed_dim", self.embed_dim),
            ("max_tokens", self.max_tokens),
            ("max_levels", self.max_levels),
            ("capture_size", self.capture_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("testbed.{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::validation("testbed.vocab_size must be at least 2"));
        }
        let gains = [self.residual_scale, self.query_gain, self.temporal_gain, self.time_gain, self.latent_temporal_gain];
        if gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::validation("testbed gains must be finite"));
        }
        Ok(())
    }
}

/// Wrap point around every temporal-attention call.
///
/// `features` has layout `(frames, channels, height, width)`; `attend` is the
/// backend's temporal transformer (attention across frames at each spatial
/// position, residual included).
pub trait TemporalWrap {
    fn wrap(
        &self,
        features: &Array4<f64>,
        attend: &dyn Fn(&Array4<f64>) -> Array4<f64>,
    ) -> Array4<f64>;
}

#[derive(Debug, Clone)]
struct Level {
    conv_w: Array2<f64>, // (C*9, D)
    conv_b: Array1<f64>,
    time_w: Array2<f64>, // (2*TIME_FREQS, D)
    wq: Array2<f64>,     // (D, heads*hd)
    wk: Array2<f64>,     // (E, heads*hd)
    wv: Array2<f64>,     // (E, heads*hd)
    wo: Array2<f64>,     // (heads*hd, D)
    tq: Array2<f64>,
    tk: Array2<f64>,
    tv: Array2<f64>,
    to: Array2<f64>,
    skip_w: Array2<f64>,
    up_w: Array2<f64>,
}

/// Saved forward state of one captured level.
#[derive(Debug, Clone)]
struct LevelTape {
    level: usize,
    pool: usize,
    grid: (usize, usize),
    hidden: Array2<f64>,
    probs: Vec<Array2<f64>>,
    keys: Vec<Array2<f64>>,
}

/// Saved forward state of every captured level, for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTape {
    frames: usize,
    grid: (usize, usize),
    latent: LatentShape,
    levels: Vec<LevelTape>,
}

/// The frozen toy backbone.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: TestbedConfig,
    schedule: NoiseSchedule,
    embed: Array2<f64>, // (vocab, E)
    levels: Vec<Level>,
    out_w: Array2<f64>, // (D, C)
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

impl ToyDenoiser {
    pub fn new(cfg: TestbedConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = make_schedule(cfg.steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (c, d, e) = (cfg.channels, cfg.hidden, cfg.embed_dim);
        let inner = cfg.heads * cfg.head_dim;
        let embed = gaussian(&mut rng, (cfg.vocab_size, e), 1.0);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let levels = (0..cfg.max_levels)
            .map(|_| Level {
                conv_w: gaussian(&mut rng, (c * 9, d), fan(c * 9) * 1.5),
                conv_b: gaussian(&mut rng, (1, d), 0.1).remove_axis(Axis(0)),
                time_w: gaussian(&mut rng, (2 * TIME_FREQS, d), cfg.time_gain * fan(2 * TIME_FREQS)),
                wq: gaussian(&mut rng, (d, inner), cfg.query_gain * fan(d)),
                wk: gaussian(&mut rng, (e, inner), fan(e)),
                wv: gaussian(&mut rng, (e, inner), fan(e)),
                wo: gaussian(&mut rng, (inner, d), fan(inner)),
                tq: gaussian(&mut rng, (d, d), cfg.temporal_gain * fan(d)),
                tk: gaussian(&mut rng, (d, d), cfg.temporal_gain * fan(d)),
                tv: gaussian(&mut rng, (d, d), fan(d)),
                to: gaussian(&mut rng, (d, d), fan(d)),
                skip_w: gaussian(&mut rng, (d, d), fan(d)),
                up_w: gaussian(&mut rng, (d, d), fan(d)),
            })
            .collect();
        let out_w = gaussian(&mut rng, (d, c), fan(d));
        Ok(ToyDenoiser { cfg, schedule, embed, levels, out_w })
    }

    pub fn config(&self) -> &TestbedConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// SHA-256 over every weight, as hex.
    pub fn weight_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |a: &Array2<f64>| {
            for v in a.iter() {
                hasher.update(v.to_le_bytes());
            }
        };
        feed(&self.embed);
        for l in &self.levels {
            for a in [
                &l.conv_w, &l.time_w, &l.wq, &l.wk, &l.wv, &l.wo, &l.tq, &l.tk, &l.tv, &l.to,
                &l.skip_w, &l.up_w,
            ] {
                feed(a);
            }
            feed(&l.conv_b.clone().insert_axis(Axis(0)));
        }
        feed(&self.out_w);
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Spatial sizes of the resolution levels for a latent of `height x width`.
    pub fn level_sizes(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let mut out = vec![(height, width)];
        while out.len() < self.cfg.max_levels {
            let (h, w) = *out.last().unwrap();
            if h % 2 != 0 || w % 2 != 0 || h / 2 < 4 || w / 2 < 4 {
                break;
            }
            out.push((h / 2, w / 2));
        }
        out
    }

    /// Level whose attention maps are captured: the finest level no larger
    /// than `capture_size` on either side, or the coarsest level otherwise.
    pub fn capture_level(&self, height: usize, width: usize) -> usize {
        let sizes = self.level_sizes(height, width);
        sizes
            .iter()
            .position(|&(h, w)| h <= self.cfg.capture_size && w <= self.cfg.capture_size)
            .unwrap_or(sizes.len() - 1)
    }

    pub fn capture_resolution(&self, height: usize, width: usize) -> (usize, usize) {
        self.level_sizes(height, width)[self.capture_level(height, width)]
    }

    fn check_inputs(&self, z: &LatentVideo, t: usize, prompt: &PromptSpec) -> Result<()> {
        self.schedule.check_timestep(t)?;
        prompt.validate(self.cfg.vocab_size, self.cfg.max_tokens)?;
        let shape = z.shape();
        if shape.channels != self.cfg.channels {
            return Err(Error::validation(format!(
                "latent has {} channels, backend expects {}",
                shape.channels, self.cfg.channels
            )));
        }
        if z.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("latent contains non-finite values"));
        }
        Ok(())
    }

    fn time_features(&self, t: usize) -> Array1<f64> {
        let tau = t as f64 / self.cfg.steps as f64;
        let mut phi = Array1::zeros(2 * TIME_FREQS);
        for i in 0..TIME_FREQS {
            let w = std::f64::consts::FRAC_PI_2 * (1u32 << i) as f64;
            phi[2 * i] = (w * tau).sin();
            phi[2 * i + 1] = (w * tau).cos();
        }
        phi
    }

    /// Keys and values of every head for the padded prompt: `(N_p, heads*hd)`.
    fn prompt_kv(&self, level: &Level, prompt: &PromptSpec) -> (Array2<f64>, Array2<f64>) {
        let ids = prompt.padded(self.cfg.max_tokens);
        let mut emb = Array2::zeros((ids.len(), self.cfg.embed_dim));
        for (i, &id) in ids.iter().enumerate() {
            emb.row_mut(i).assign(&self.embed.row(id as usize));
        }
        (emb.dot(&level.wk), emb.dot(&level.wv))
    }

    /// Stem of level `l`: pooled latent → conv3x3 → tanh. Rows are indexed
    /// `(f·h + y)·w + x`.
    fn stem(&self, l: usize, z: &LatentVideo, t: usize) -> (Array2<f64>, usize, (usize, usize)) {
        let pool = 1usize << l;
        let x = avg_pool(z.data(), pool);
        let (_, _, h, w) = x.dim();
        let level = &self.levels[l];
        let cols = im2col(&x);
        let temb = self.time_features(t).dot(&level.time_w);
        let bias = &level.conv_b + &temb;
        let mut hidden = cols.dot(&level.conv_w);
        hidden += &bias;
        hidden.mapv_inplace(f64::tanh);
        (hidden, pool, (h, w))
    }

    /// Per-head attention probabilities `(N, N_p)` and the attention output
    /// projected back to the hidden width.
    fn cross_attention(
        &self,
        level: &Level,
        hidden: &Array2<f64>,
        keys: &Array2<f64>,
        values: &Array2<f64>,
    ) -> (Vec<Array2<f64>>, Array2<f64>) {
        let hd = self.cfg.head_dim;
        let q = hidden.dot(&level.wq);
        let mut probs = Vec::with_capacity(self.cfg.heads);
        let mut mixed = Array2::zeros((hidden.nrows(), self.cfg.heads * hd));
        for head in 0..self.cfg.heads {
            let cols = s![.., head * hd..(head + 1) * hd];
            let mut a = q.slice(cols).dot(&keys.slice(cols).t()) / (hd as f64).sqrt();
            softmax_rows(&mut a);
            mixed.slice_mut(cols).assign(&a.dot(&values.slice(cols)));
            probs.push(a);
        }
        (probs, mixed.dot(&level.wo))
    }

    fn head_keys(&self, keys: &Array2<f64>) -> Vec<Array2<f64>> {
        let hd = self.cfg.head_dim;
        (0..self.cfg.heads)
            .map(|h| keys.slice(s![.., h * hd..(h + 1) * hd]).to_owned())
            .collect()
    }

    /// Head-averaged maps of one level, `(F, N_p, h, w)`.
    fn level_maps(&self, probs: &[Array2<f64>], frames: usize, grid: (usize, usize)) -> Array4<f64> {
        let n_tok = probs[0].ncols();
        let mut mean = Array2::zeros(probs[0].raw_dim());
        for p in probs {
            mean += p;
        }
        mean /= probs.len() as f64;
        let (h, w) = grid;
        mean.into_shape_with_order((frames, h, w, n_tok))
            .expect("row layout")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
    }

    /// Mean of per-level maps after nearest-neighbour upsampling to `grid`.
    fn combine_levels(&self, maps: &[Array4<f64>], grid: (usize, usize), t: usize) -> AttentionStack {
        let (nf, n_tok, _, _) = maps[0].dim();
        let (h, w) = grid;
        let inv = 1.0 / maps.len() as f64;
        let mut out = Array4::zeros((nf, n_tok, h, w));
        for m in maps {
            let (_, _, mh, mw) = m.dim();
            let (kh, kw) = (h / mh, w / mw);
            out.zip_mut_with(
                &Array4::from_shape_fn((nf, n_tok, h, w), |(f, k, r, c)| m[[f, k, r / kh, c / kw]]),
                |o, v| *o += v * inv,
            );
        }
        AttentionStack::new(out, t)
    }

    /// Temporal transformer on features laid out `(F, D, h, w)`: attention
    /// across frames at every spatial position, plus residual.
    fn temporal_attention(&self, level: &Level, x: &Array4<f64>) -> Array4<f64> {
        let (nf, d, h, w) = x.dim();
        let rows = temporal_rearrange(x);
        let flat = rows.view().into_shape_with_order((h * w * nf, d)).expect("contiguous");
        let q = flat.dot(&level.tq);
        let k = flat.dot(&level.tk);
        let v = flat.dot(&level.tv);
        let scale = 1.0 / (d as f64).sqrt();
        let mut mixed = Array2::zeros((h * w * nf, d));
        let mut logits = Array2::zeros((nf, nf));
        for p in 0..h * w {
            let r = s![p * nf..(p + 1) * nf, ..];
            logits.assign(&(q.slice(r).dot(&k.slice(r).t()) * scale));
            softmax_rows(&mut logits);
            mixed.slice_mut(r).assign(&logits.dot(&v.slice(r)));
        }
        let out = flat.to_owned() + mixed.dot(&level.to);
        let out = out.into_shape_with_order((h * w, nf, d)).expect("row count");
        temporal_restore(&out, h, w).expect("consistent shape")
    }

    /// Noise prediction `ε_θ(z_t, t, c)`. When `capture` is set the
    /// cross-attention maps at the capture resolution are returned too.
    /// `temporal` wraps every temporal-attention call.
    pub fn denoise(
        &self,
        z: &LatentVideo,
        t: usize,
        prompt: &PromptSpec,
        capture: bool,
        temporal: Option<&dyn TemporalWrap>,
    ) -> Result<(LatentVideo, Option<AttentionStack>)> {
        self.check_inputs(z, t, prompt)?;
        let shape = z.shape();
        let sizes = self.level_sizes(shape.height, shape.width);
        let cap = self.capture_level(shape.height, shape.width);
        let nf = shape.frames;
        let d = self.cfg.hidden;

        let mut captured = Vec::new();
        let mut outs: Vec<Array2<f64>> = Vec::with_capacity(sizes.len());
        for (l, &(h, w)) in sizes.iter().enumerate() {
            let level = &self.levels[l];
            let (hidden, _, _) = self.stem(l, z, t);
            let (keys, values) = self.prompt_kv(level, prompt);
            let (probs, attn_out) = self.cross_attention(level, &hidden, &keys, &values);
            if capture && l >= cap {
                captured.push(self.level_maps(&probs, nf, (h, w)));
            }
            let u = hidden + attn_out;
            let u4 = rows_to_frames(u, nf, h, w, d);
            let attend = |x: &Array4<f64>| self.temporal_attention(level, x);
            let w4 = match temporal {
                Some(hook) => hook.wrap(&u4, &attend),
                None => attend(&u4),
            };
            if w4.dim() != (nf, d, h, w) {
                return Err(Error::Internal("temporal wrap changed the feature shape".into()));
            }
            outs.push(frames_to_rows(&w4));
        }

        let mut y = outs.pop().expect("at least one level");
        for l in (0..outs.len()).rev() {
            let (h, w) = sizes[l];
            let up = upsample_rows(&y, nf, sizes[l + 1], (h, w));
            let level = &self.levels[l];
            let mut next = outs[l].dot(&level.skip_w) + up.dot(&level.up_w);
            next.mapv_inplace(f64::tanh);
            y = next;
        }
        let residual = rows_to_frames(y.dot(&self.out_w), nf, shape.height, shape.width, shape.channels);
        let prior = (1.0 - self.schedule.a_bar(t)).sqrt();
        let s = self.cfg.residual_scale;
        let mut eps = z.data().clone();
        ndarray::Zip::from(&mut eps)
            .and(&residual)
            .for_each(|e, &r| *e = prior * *e + s * r);
        let kappa = self.cfg.latent_temporal_gain;
        if kappa != 0.0 {
            let attend = |x: &Array4<f64>| latent_temporal_attention(x);
            let mixed = match temporal {
                Some(hook) => hook.wrap(z.data(), &attend),
                None => attend(z.data()),
            };
            if mixed.dim() != z.data().dim() {
                return Err(Error::Internal("temporal wrap changed the latent shape".into()));
            }
            ndarray::Zip::from(&mut eps)
                .and(&mixed)
                .and(z.data())
                .for_each(|e, &m, &x| *e -= prior * kappa * (m - x));
        }
        let stack = (!captured.is_empty()).then(|| self.combine_levels(&captured, sizes[cap], t));
        Ok((LatentVideo::new(eps)?, stack))
    }

    /// Dedicated forward pass computing only the captured attention maps,
    /// keeping what the backward pass needs.
    pub fn capture_attention(
        &self,
        z: &LatentVideo,
        t: usize,
        prompt: &PromptSpec,
    ) -> Result<(AttentionStack, AttentionTape)> {
        self.check_inputs(z, t, prompt)?;
        let shape = z.shape();
        let sizes = self.level_sizes(shape.height, shape.width);
        let cap = self.capture_level(shape.height, shape.width);
        let mut maps = Vec::new();
        let mut tapes = Vec::new();
        for l in cap..sizes.len() {
            let level = &self.levels[l];
            let (hidden, pool, grid) = self.stem(l, z, t);
            let (keys, values) = self.prompt_kv(level, prompt);
            let (probs, _) = self.cross_attention(level, &hidden, &keys, &values);
            maps.push(self.level_maps(&probs, shape.frames, grid));
            tapes.push(LevelTape { level: l, pool, grid, hidden, probs, keys: self.head_keys(&keys) });
        }
        let stack = self.combine_levels(&maps, sizes[cap], t);
        let tape = AttentionTape { frames: shape.frames, grid: sizes[cap], latent: shape, levels: tapes };
        Ok((stack, tape))
    }

    /// Vector-Jacobian product of the captured maps: given `∂L/∂maps` with
    /// layout `(F, N_p, h, w)`, returns `∂L/∂z_t`.
    pub fn attention_vjp(&self, tape: &AttentionTape, grad: &Array4<f64>) -> Result<LatentVideo> {
        let (h, w) = tape.grid;
        let n_tok = tape.levels[0].probs[0].ncols();
        if grad.dim() != (tape.frames, n_tok, h, w) {
            return Err(Error::Shape {
                expected: vec![tape.frames, n_tok, h, w],
                got: grad.shape().to_vec(),
            });
        }
        let inv_levels = 1.0 / tape.levels.len() as f64;
        let mut dz = Array4::zeros(tape.latent.dims());
        for lt in &tape.levels {
            // adjoint of nearest upsampling: sum over each block
            let (lh, lw) = lt.grid;
            let (kh, kw) = (h / lh, w / lw);
            let mut g = Array4::<f64>::zeros((tape.frames, n_tok, lh, lw));
            for ((f, k, r, c), &v) in grad.indexed_iter() {
                g[[f, k, r / kh, c / kw]] += v * inv_levels;
            }
            dz += &self.level_vjp(lt, tape, &g);
        }
        LatentVideo::new(dz)
    }

    fn level_vjp(&self, lt: &LevelTape, tape: &AttentionTape, grad: &Array4<f64>) -> Array4<f64> {
        let (h, w) = lt.grid;
        let n_tok = grad.dim().1;
        let level = &self.levels[lt.level];
        let hd = self.cfg.head_dim;
        let n_heads = lt.probs.len() as f64;
        let g_rows = grad
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((tape.frames * h * w, n_tok))
            .expect("row layout");

        let mut dq = Array2::zeros((g_rows.nrows(), self.cfg.heads * hd));
        for (head, (a, k)) in lt.probs.iter().zip(&lt.keys).enumerate() {
            // softmax backward: ds = a ⊙ (da − Σ_j a_j da_j)
            let da = &g_rows / n_heads;
            let dot = (a * &da).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = a * &(da - &dot);
            let dq_h = ds.dot(k) / (hd as f64).sqrt();
            dq.slice_mut(s![.., head * hd..(head + 1) * hd]).assign(&dq_h);
        }
        let dh = dq.dot(&level.wq.t());
        let dpre = dh * &lt.hidden.mapv(|v| 1.0 - v * v);
        let dcols = dpre.dot(&level.conv_w.t());
        let dx = col2im(&dcols, tape.frames, self.cfg.channels, h, w);
        avg_pool_adjoint(&dx, lt.pool, tape.latent)
    }
}

/// Attention across frames at every position with the channel vector as
/// query, key and value: `out_f = Σ_g softmax_g(z_f·z_g / sqrt(C)) z_g`.
fn latent_temporal_attention(x: &Array4<f64>) -> Array4<f64> {
    let (_, nc, h, w) = x.dim();
    let rows = temporal_rearrange(x);
    let scale = 1.0 / (nc as f64).sqrt();
    let mut out = rows.clone();
    for p in 0..h * w {
        let v = rows.index_axis(Axis(0), p);
        let mut logits = v.dot(&v.t()) * scale;
        softmax_rows(&mut logits);
        out.index_axis_mut(Axis(0), p).assign(&logits.dot(&v));
    }
    temporal_restore(&out, h, w).expect("consistent shape")
}

fn rows_to_frames(rows: Array2<f64>, nf: usize, h: usize, w: usize, d: usize) -> Array4<f64> {
    rows.into_shape_with_order((nf, h, w, d))
        .expect("row layout")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
}

fn frames_to_rows(x: &Array4<f64>) -> Array2<f64> {
    let (nf, d, h, w) = x.dim();
    x.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((nf * h * w, d))
        .expect("row layout")
}

fn upsample_rows(y: &Array2<f64>, nf: usize, from: (usize, usize), to: (usize, usize)) -> Array2<f64> {
    let d = y.ncols();
    let (fh, fw) = from;
    let (th, tw) = to;
    let mut out = Array2::zeros((nf * th * tw, d));
    for f in 0..nf {
        for r in 0..th {
            for c in 0..tw {
                let src = (f * fh + r * fh / th) * fw + c * fw / tw;
                out.row_mut((f * th + r) * tw + c).assign(&y.row(src));
            }
        }
    }
    out
}

fn avg_pool(z: &Array4<f64>, k: usize) -> Array4<f64> {
    if k == 1 {
        return z.clone();
    }
    let (nf, nc, h, w) = z.dim();
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    Array4::from_shape_fn((nf, nc, oh, ow), |(f, c, r, q)| {
        let mut acc = 0.0;
        for dr in 0..k {
            for dq in 0..k {
                acc += z[[f, c, r * k + dr, q * k + dq]];
            }
        }
        acc * inv
    })
}

fn avg_pool_adjoint(dx: &Array4<f64>, k: usize, latent: LatentShape) -> Array4<f64> {
    if k == 1 {
        return dx.clone();
    }
    let inv = 1.0 / (k * k) as f64;
    Array4::from_shape_fn(latent.dims(), |(f, c, r, q)| dx[[f, c, r / k, q / k]] * inv)
}

/// 3x3 zero-padded patches: row `(f·h + y)·w + x`, column `c·9 + ky·3 + kx`.
fn im2col(x: &Array4<f64>) -> Array2<f64> {
    let (nf, nc, h, w) = x.dim();
    let mut cols = Array2::zeros((nf * h * w, nc * 9));
    for f in 0..nf {
        for y in 0..h {
            for xx in 0..w {
                let row = (f * h + y) * w + xx;
                for c in 0..nc {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[[row, c * 9 + ky * 3 + kx]] = x[[f, c, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, nf: usize, nc: usize, h: usize, w: usize) -> Array4<f64> {
    let mut x = Array4::zeros((nf, nc, h, w));
    for f in 0..nf {
        for y in 0..h {
            for xx in 0..w {
                let row = (f * h + y) * w + xx;
                for c in 0..nc {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            x[[f, c, sy as usize, sx as usize]] += cols[[row, c * 9 + ky * 3 + kx]];
                        }
                    }
                }
            }
        }
    }
    x
}
