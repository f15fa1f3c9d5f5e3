//! Control-quality metrics, a toy attention detector and detection I/O.
//!
//! mIoU, AP50 and center distance average over frames with a detection;
//! coverage is the detection rate. With no detections the averaged metrics
//! are `None`, never zero.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::testbed::container::write_atomic;
use crate::testbed::{AttentionStack, PromptSpec};
use crate::trajectory::{BBox, BoxTrajectory};

/// One frame's detector output. `confidence` is present iff `bbox` is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DetectionRecord", into = "DetectionRecord")]
pub struct Detection {
    found: Option<(BBox, f64)>,
}

impl Detection {
    pub fn found(bbox: BBox, confidence: f64) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::validation(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Detection { found: Some((bbox, confidence)) })
    }

    pub fn missing() -> Self {
        Detection { found: None }
    }

    pub fn bbox(&self) -> Option<BBox> {
        self.found.map(|(b, _)| b)
    }

    pub fn confidence(&self) -> Option<f64> {
        self.found.map(|(_, c)| c)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    #[serde(rename = "box")]
    bbox: Option<[f64; 4]>,
    confidence: Option<f64>,
}

impl TryFrom<DetectionRecord> for Detection {
    type Error = Error;

    fn try_from(r: DetectionRecord) -> Result<Self> {
        match (r.bbox, r.confidence) {
            (Some(b), Some(c)) => Detection::found(BBox::from_array(b)?, c),
            (None, None) => Ok(Detection::missing()),
            (None, Some(_)) => Err(Error::validation("confidence given without a box")),
            (Some(_), None) => Err(Error::validation("box given without a confidence")),
        }
    }
}

impl From<Detection> for DetectionRecord {
    fn from(d: Detection) -> Self {
        DetectionRecord { bbox: d.bbox().map(|b| b.to_array()), confidence: d.confidence() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectionsFile {
    frames: Vec<serde_json::Value>,
}

/// Read `{"frames": [{"box": [x1,y1,x2,y2] | null, "confidence": c | null}, ...]}`.
pub fn load_external_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_detections(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let file: DetectionsFile = serde_json::from_str(text)
        .map_err(|e| Error::validation(format!("detections file must be {{\"frames\": [...]}}: {e}")))?;
    file.frames
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let rec: DetectionRecord =
                serde_json::from_value(v).map_err(|e| Error::validation(format!("frame {i}: {e}")))?;
            Detection::try_from(rec).map_err(|e| Error::validation(format!("frame {i}: {e}")))
        })
        .collect()
}

pub fn detections_to_json(dets: &[Detection]) -> Result<String> {
    let frames = dets.iter().map(serde_json::to_value).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(serde_json::to_string_pretty(&DetectionsFile { frames })?)
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    write_atomic(path, detections_to_json(dets)?.as_bytes())
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub detected: bool,
    pub iou: Option<f64>,
    /// IoU above the threshold; `None` when undetected.
    pub hit: Option<bool>,
    pub center_distance: Option<f64>,
}

/// Scores needing pretrained external scorers; filled in by outside tools.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalScores {
    pub text_align: Option<f64>,
    pub consistency: Option<f64>,
    pub pick_score: Option<f64>,
}

/// Aggregate control quality of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub miou: Option<f64>,
    /// Fraction of detected frames with IoU above the threshold.
    pub ap50: Option<f64>,
    /// Same, counting undetected frames as misses.
    pub ap50_all_frames: f64,
    pub coverage: f64,
    /// Euclidean center distance in normalized coordinates.
    pub center_distance: Option<f64>,
    pub center_distance_pixels: Option<f64>,
    pub iou_threshold: f64,
    pub n_frames: usize,
    pub n_detected: usize,
    pub frames: Vec<FrameMetrics>,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub external: ExternalScores,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    pub iou_threshold: f64,
    /// `(width, height)` in pixels for the pixel-space center distance.
    pub frame_size: Option<(f64, f64)>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { iou_threshold: 0.5, frame_size: None }
    }
}

/// Metrics at IoU threshold 0.5.
pub fn control_metrics(dets: &[Detection], traj: &BoxTrajectory) -> Result<ControlReport> {
    control_metrics_with(dets, traj, MetricOptions::default())
}

pub fn control_metrics_with(
    dets: &[Detection],
    traj: &BoxTrajectory,
    opts: MetricOptions,
) -> Result<ControlReport> {
    if dets.len() != traj.n_frames() {
        return Err(Error::validation(format!(
            "{} detections for a {}-frame trajectory",
            dets.len(),
            traj.n_frames()
        )));
    }
    let frames: Vec<FrameMetrics> = dets
        .iter()
        .zip(traj.boxes())
        .enumerate()
        .map(|(f, (d, gt))| match d.bbox() {
            Some(b) => {
                let v = iou(&b, gt);
                FrameMetrics {
                    frame: f,
                    detected: true,
                    iou: Some(v),
                    hit: Some(v > opts.iou_threshold),
                    center_distance: Some(b.center_distance(gt)),
                }
            }
            None => FrameMetrics { frame: f, detected: false, iou: None, hit: None, center_distance: None },
        })
        .collect();
    let n = frames.len();
    let detected: Vec<&FrameMetrics> = frames.iter().filter(|m| m.detected).collect();
    let nd = detected.len();
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let hits = detected.iter().filter(|m| m.hit == Some(true)).count();
    let cd_pixels = opts.frame_size.and_then(|(w, h)| {
        mean(dets
            .iter()
            .zip(traj.boxes())
            .filter_map(|(d, gt)| d.bbox().map(|b| b.center_distance_pixels(gt, w, h)))
            .collect())
    });
    Ok(ControlReport {
        miou: mean(detected.iter().filter_map(|m| m.iou).collect()),
        ap50: (nd > 0).then(|| hits as f64 / nd as f64),
        ap50_all_frames: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        coverage: if n == 0 { 0.0 } else { nd as f64 / n as f64 },
        center_distance: mean(detected.iter().filter_map(|m| m.center_distance).collect()),
        center_distance_pixels: cd_pixels,
        iou_threshold: opts.iou_threshold,
        n_frames: n,
        n_detected: nd,
        frames,
        source: String::new(),
        external: ExternalScores::default(),
    })
}

/// Threshold rule of the attention detector: cells strictly above
/// `mean + sigmas · std` of the map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionPolicy {
    pub sigmas: f64,
}

impl Default for DetectionPolicy {
    fn default() -> Self {
        DetectionPolicy { sigmas: 1.0 }
    }
}

/// Cells of the largest 4-connected above-threshold component, as
/// `(row_lo, col_lo, row_hi, col_hi)` inclusive. Ties go to the component
/// met first in row-major order.
fn largest_component(mask: &[bool], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, (usize, usize, usize, usize))> = None;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut size = 0;
        let mut bounds = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            size += 1;
            bounds = (bounds.0.min(r), bounds.1.min(c), bounds.2.max(r), bounds.3.max(c));
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, bounds));
        }
    }
    best.map(|(_, b)| b)
}

/// Detect an object in one attention map.
pub fn detect_in_map(map: ArrayView2<f64>, policy: DetectionPolicy) -> Detection {
    let (h, w) = map.dim();
    let n = (h * w) as f64;
    let mean = map.sum() / n;
    let std = (map.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let threshold = mean + policy.sigmas * std;
    let mask: Vec<bool> = map.iter().map(|&v| v > threshold).collect();
    let Some((r0, c0, r1, c1)) = largest_component(&mask, h, w) else {
        return Detection::missing();
    };
    let total = map.sum();
    let inside: f64 = map.slice(ndarray::s![r0..=r1, c0..=c1]).sum();
    let confidence = if total > 0.0 { (inside / total).clamp(0.0, 1.0) } else { 0.0 };
    let bbox = BBox {
        x1: c0 as f64 / w as f64,
        y1: r0 as f64 / h as f64,
        x2: (c1 + 1) as f64 / w as f64,
        y2: (r1 + 1) as f64 / h as f64,
    };
    Detection::found(bbox, confidence).unwrap_or_else(|_| Detection::missing())
}

/// Per-frame detections from token `token`'s attention maps.
pub fn detect_from_attention(
    attn: &AttentionStack,
    token: usize,
    policy: DetectionPolicy,
) -> Result<Vec<Detection>> {
    if token >= attn.n_tokens() {
        return Err(Error::validation(format!(
            "token {token} out of range (attention has {} tokens)",
            attn.n_tokens()
        )));
    }
    Ok((0..attn.n_frames()).map(|f| detect_in_map(attn.map(f, token), policy)).collect())
}

/// The 33 evaluation prompts with the word naming the controlled object.
pub const BENCHMARK_PROMPTS: [(&str, &str); 33] = [
    ("A woodpecker climbing up a tree trunk.", "woodpecker"),
    ("A squirrel descending a tree after gathering nuts.", "squirrel"),
    ("A bird diving towards the water to catch fish.", "bird"),
    ("A frog leaping up to catch a fly.", "frog"),
    ("A parrot flying upwards towards the treetops.", "parrot"),
    ("A squirrel jumping from one tree to another.", "squirrel"),
    ("A rabbit burrowing downwards into its warren.", "rabbit"),
    ("A satellite orbiting Earth in outer space.", "satellite"),
    ("A skateboarder performing tricks at a skate park.", "skateboarder"),
    ("A leaf falling gently from a tree.", "leaf"),
    ("A paper plane gliding in the air.", "plane"),
    ("A bear climbing down a tree after spotting a threat.", "bear"),
    ("A duck diving underwater in search of food.", "duck"),
    ("A kangaroo is hopping down a gentle slope.", "kangaroo"),
    ("An owl swooping down on its prey during the night.", "owl"),
    ("A balloon drifting across a clear sky.", "balloon"),
    ("A bus moving through London streets.", "bus"),
    ("A plane flying high in the sky.", "plane"),
    ("A helicopter hovering above a cityscape.", "helicopter"),
    ("A streetcar trundling down tracks in a historic district.", "streetcar"),
    ("A rocket launching into space from a launchpad.", "rocket"),
    ("A deer standing in a snowy field.", "deer"),
    ("A horse grazing in a meadow.", "horse"),
    ("A fox sitting in a forest clearing.", "fox"),
    ("A swan floating gracefully on a lake.", "swan"),
    ("A panda munching bamboo in a bamboo forest.", "panda"),
    ("A penguin standing on an iceberg.", "penguin"),
    ("A lion lying in the savanna grass.", "lion"),
    ("An owl perched silently in a tree at night.", "owl"),
    ("A dolphin just breaking the ocean surface.", "dolphin"),
    ("A camel resting in a desert landscape.", "camel"),
    ("A kangaroo standing in the Australian outback.", "kangaroo"),
    ("A colorful hot air balloon tethered to the ground.", "balloon"),
];

/// Deterministic word-level tokenization for the toy backend: each
/// lowercased word hashes (FNV-1a) to an id in `1..vocab_size`. The prompt is
/// truncated to `max_tokens` words, keeping the target word.
pub fn toy_prompt(text: &str, target_word: &str, vocab_size: usize, max_tokens: usize) -> Result<PromptSpec> {
    if vocab_size < 2 || max_tokens == 0 {
        return Err(Error::validation("vocabulary needs at least 2 entries and context at least 1 token"));
    }
    let words: Vec<String> = text
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    let target = words
        .iter()
        .position(|w| w == &target_word.to_lowercase())
        .ok_or_else(|| Error::validation(format!("target word '{target_word}' not in prompt '{text}'")))?;
    let start = target.saturating_sub(max_tokens - 1).min(target);
    let kept = &words[start..(start + max_tokens).min(words.len())];
    let ids = kept
        .iter()
        .map(|w| {
            let h = w.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
            (h % (vocab_size as u64 - 1)) as u32 + 1
        })
        .collect();
    Ok(PromptSpec::new(ids, vec![target - start]))
}

/// Evaluation prompts paired with trajectory files (every prompt runs on
/// every trajectory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub prompts: Vec<BenchmarkPrompt>,
    pub trajectories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPrompt {
    pub text: String,
    pub target_word: String,
}

impl BenchmarkManifest {
    pub fn new(trajectories: Vec<String>) -> Self {
        let prompts = BENCHMARK_PROMPTS
            .iter()
            .map(|(t, w)| BenchmarkPrompt { text: t.to_string(), target_word: w.to_string() })
            .collect();
        BenchmarkManifest { prompts, trajectories }
    }
}
