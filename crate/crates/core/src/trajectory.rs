//! Box trajectories: the user's control signal.
//!
//! Boxes live in normalized frame coordinates so one trajectory file serves
//! any resolution. They are discretized onto a latent or attention grid with
//! outward (floor/ceil) rounding, so a mask never under-covers its box.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seed of the published complex-trajectory dataset. Bump together with
/// [`COMPLEX_DATASET_VERSION`] whenever the generator changes.
pub const COMPLEX_TRAJECTORY_SEED: u64 = 20240117;
pub const COMPLEX_DATASET_VERSION: u32 = 1;

/// Side length of the boxes used by the simple trajectory set.
pub const SIMPLE_BOX_SIZE: f64 = 0.3;

// Products such as 0.35 * 20 land a hair above an integer; without slack the
// outward rounding would add a spurious cell.
const QUANT_EPS: f64 = 1e-9;

/// An axis-aligned box in normalized frame coordinates; `(x1, y1)` is the
/// upper-left corner and `(x2, y2)` the lower-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let BBox { x1, y1, x2, y2 } = *self;
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite())
            && 0.0 <= x1
            && x1 < x2
            && x2 <= 1.0
            && 0.0 <= y1
            && y1 < y2
            && y2 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "box ({x1}, {y1}, {x2}, {y2}) must satisfy 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1"
            )))
        }
    }

    /// Box of the given size centered at `(cx, cy)`, clamped into the frame.
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let (x1, x2) = clamp_span(cx, w);
        let (y1, y2) = clamp_span(cy, h);
        BBox::new(x1, y1, x2, y2)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    /// Euclidean distance between centers in normalized coordinates.
    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Center distance relative to the frame diagonal (range `[0, 1]`).
    pub fn center_distance_diagonal(&self, other: &BBox) -> f64 {
        self.center_distance(other) / std::f64::consts::SQRT_2
    }

    /// Center distance in pixels for a frame of `width x height` pixels.
    pub fn center_distance_pixels(&self, other: &BBox, width: f64, height: f64) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        (((ax - bx) * width).powi(2) + ((ay - by) * height).powi(2)).sqrt()
    }
}

fn clamp_span(center: f64, size: f64) -> (f64, f64) {
    let lo = (center - size / 2.0).clamp(0.0, (1.0 - size).max(0.0));
    let hi = (lo + size).min(1.0);
    (lo, hi)
}

/// One box per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxTrajectory {
    boxes: Vec<BBox>,
}

impl BoxTrajectory {
    pub fn new(boxes: Vec<BBox>) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::validation("trajectory must contain at least one box"));
        }
        for (f, b) in boxes.iter().enumerate() {
            b.validate()
                .map_err(|e| Error::validation(format!("frame {f}: {e}")))?;
        }
        Ok(BoxTrajectory { boxes })
    }

    /// The same box repeated for every frame.
    pub fn stationary(b: BBox, n_frames: usize) -> Result<Self> {
        BoxTrajectory::new(vec![b; n_frames])
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn n_frames(&self) -> usize {
        self.boxes.len()
    }

    pub fn first(&self) -> BBox {
        self.boxes[0]
    }

    /// Check the trajectory against a backend's frame count.
    pub fn expect_frames(&self, n_frames: usize) -> Result<()> {
        if self.n_frames() != n_frames {
            return Err(Error::validation(format!(
                "trajectory has {} boxes but the video has {} frames",
                self.n_frames(),
                n_frames
            )));
        }
        Ok(())
    }

    /// Quantize every box onto a `grid_w x grid_h` grid.
    pub fn quantize(&self, grid_w: usize, grid_h: usize) -> Vec<GridBox> {
        self.boxes
            .iter()
            .map(|b| quantize_box(b, grid_w, grid_h))
            .collect()
    }

    pub fn to_file(&self) -> TrajectoryFile {
        TrajectoryFile {
            n_frames: self.n_frames(),
            boxes: self.boxes.iter().map(BBox::to_array).collect(),
        }
    }

    pub fn from_file(file: &TrajectoryFile) -> Result<Self> {
        if file.boxes.len() != file.n_frames {
            return Err(Error::validation(format!(
                "n_frames is {} but {} boxes are listed",
                file.n_frames,
                file.boxes.len()
            )));
        }
        let boxes = file
            .boxes
            .iter()
            .enumerate()
            .map(|(f, a)| {
                BBox::from_array(*a).map_err(|e| Error::validation(format!("frame {f}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        BoxTrajectory::new(boxes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: TrajectoryFile = serde_json::from_str(&text)?;
        BoxTrajectory::from_file(&file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("trajectory serializes")
    }

    /// Stable FNV-1a hash over the coordinate bits, used to tag persisted priors.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in &self.boxes {
            for v in b.to_array() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        format!("{h:016x}")
    }
}

/// On-disk trajectory document: `{"n_frames": N, "boxes": [[x1,y1,x2,y2], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub n_frames: usize,
    pub boxes: Vec<[f64; 4]>,
}

/// Half-open integer cell bounds `[lo, hi)` on a latent or attention grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridBox {
    pub col_lo: usize,
    pub row_lo: usize,
    pub col_hi: usize,
    pub row_hi: usize,
}

impl GridBox {
    pub fn new(col_lo: usize, row_lo: usize, col_hi: usize, row_hi: usize) -> Self {
        GridBox { col_lo, row_lo, col_hi, row_hi }
    }

    pub fn width(&self) -> usize {
        self.col_hi - self.col_lo
    }

    pub fn height(&self) -> usize {
        self.row_hi - self.row_lo
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_lo..self.row_hi).contains(&row) && (self.col_lo..self.col_hi).contains(&col)
    }

    pub fn fits(&self, grid_w: usize, grid_h: usize) -> bool {
        self.col_lo < self.col_hi
            && self.row_lo < self.row_hi
            && self.col_hi <= grid_w
            && self.row_hi <= grid_h
    }

    /// Center in continuous cell-index coordinates: a unit box at cell
    /// `(c, r)` has center `(c, r)`.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.col_lo + self.col_hi) as f64 / 2.0 - 0.5,
            (self.row_lo + self.row_hi) as f64 / 2.0 - 0.5,
        )
    }

    /// A box with `shape = (height, width)` centered as close as possible to
    /// this box's center while staying inside the grid.
    pub fn with_shape(&self, height: usize, width: usize, grid_w: usize, grid_h: usize) -> GridBox {
        fn place(lo: usize, hi: usize, size: usize, limit: usize) -> usize {
            let size = size.min(limit);
            // 2*start + size ≈ lo + hi
            let twice = (lo + hi) as isize - size as isize;
            let start = twice.div_euclid(2).max(0) as usize;
            start.min(limit - size)
        }
        let c = place(self.col_lo, self.col_hi, width, grid_w);
        let r = place(self.row_lo, self.row_hi, height, grid_h);
        GridBox::new(c, r, c + width.min(grid_w), r + height.min(grid_h))
    }
}

/// Discretize a box onto a grid with outward rounding. Returns the cell box and
/// whether it had to be widened to reach the one-cell minimum.
pub fn quantize_box_flagged(b: &BBox, grid_w: usize, grid_h: usize) -> (GridBox, bool) {
    assert!(grid_w >= 1 && grid_h >= 1, "grid dimensions must be positive");
    fn axis(lo: f64, hi: f64, n: usize) -> (usize, usize, bool) {
        let nf = n as f64;
        let mut a = ((lo * nf + QUANT_EPS).floor().max(0.0) as usize).min(n);
        let mut b = ((hi * nf - QUANT_EPS).ceil().max(0.0) as usize).min(n);
        let mut widened = false;
        if b <= a {
            widened = true;
            if a >= n {
                a = n - 1;
            }
            b = a + 1;
        }
        (a, b, widened)
    }
    let (c0, c1, wc) = axis(b.x1, b.x2, grid_w);
    let (r0, r1, wr) = axis(b.y1, b.y2, grid_h);
    (GridBox::new(c0, r0, c1, r1), wc || wr)
}

/// Discretize a box onto a `grid_w x grid_h` grid (floor for the low edges,
/// ceil for the high edges). Degenerate boxes are widened to one cell and a
/// warning is logged.
pub fn quantize_box(b: &BBox, grid_w: usize, grid_h: usize) -> GridBox {
    let (g, widened) = quantize_box_flagged(b, grid_w, grid_h);
    if widened {
        log::warn!("box {b:?} quantized to zero area on {grid_w}x{grid_h}; widened to one cell");
    }
    g
}

/// Binary mask of a grid box. `grid` holds exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub grid: Array2<f64>,
    pub gbox: GridBox,
}

impl Mask {
    pub fn ones(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }
}

pub fn build_mask(gbox: GridBox, grid_w: usize, grid_h: usize) -> Result<Mask> {
    if !gbox.fits(grid_w, grid_h) {
        return Err(Error::validation(format!(
            "grid box {gbox:?} does not fit a {grid_w}x{grid_h} grid"
        )));
    }
    let grid = Array2::from_shape_fn((grid_h, grid_w), |(r, c)| {
        if gbox.contains(r, c) {
            1.0
        } else {
            0.0
        }
    });
    Ok(Mask { grid, gbox })
}

/// Linearly interpolate box centers from `start` to `end` over `n` frames,
/// keeping the box size fixed.
fn linear_path(start: (f64, f64), end: (f64, f64), size: f64, n: usize) -> BoxTrajectory {
    let boxes = (0..n)
        .map(|f| {
            let s = if n == 1 { 0.0 } else { f as f64 / (n - 1) as f64 };
            let cx = start.0 + (end.0 - start.0) * s;
            let cy = start.1 + (end.1 - start.1) * s;
            BBox::centered(cx, cy, size, size).expect("simple path stays in frame")
        })
        .collect();
    BoxTrajectory { boxes }
}

/// Names of the eight simple trajectories, in the order returned by
/// [`simple_trajectories`].
pub const SIMPLE_NAMES: [&str; 8] = [
    "left_to_right",
    "right_to_left",
    "top_to_bottom",
    "bottom_to_top",
    "topleft_to_bottomright",
    "bottomright_to_topleft",
    "topright_to_bottomleft",
    "bottomleft_to_topright",
];

/// The eight canonical straight-line paths: four axis-aligned and four
/// diagonal, each moving a fixed-size box between 0.2 and 0.8.
pub fn simple_trajectories(n_frames: usize) -> Result<Vec<BoxTrajectory>> {
    if n_frames < 2 {
        return Err(Error::validation("simple trajectories need at least 2 frames"));
    }
    let (lo, mid, hi) = (0.2, 0.5, 0.8);
    let ends = [
        ((lo, mid), (hi, mid)),
        ((hi, mid), (lo, mid)),
        ((mid, lo), (mid, hi)),
        ((mid, hi), (mid, lo)),
        ((lo, lo), (hi, hi)),
        ((hi, hi), (lo, lo)),
        ((hi, lo), (lo, hi)),
        ((lo, hi), (hi, lo)),
    ];
    Ok(ends
        .iter()
        .map(|&(s, e)| linear_path(s, e, SIMPLE_BOX_SIZE, n_frames))
        .collect())
}

fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    0.5 * ((2.0 * p1)
        + (-p0 + p2) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3)
}

/// Evaluate a Catmull-Rom spline through `pts` at parameter `u` in
/// `[0, pts.len() - 1]`; endpoints are duplicated as phantom controls.
fn spline_at(pts: &[(f64, f64)], u: f64) -> (f64, f64) {
    let last = pts.len() - 1;
    let seg = (u.floor() as usize).min(last - 1);
    let t = u - seg as f64;
    let get = |i: isize| pts[i.clamp(0, last as isize) as usize];
    let s = seg as isize;
    let (a, b, c, d) = (get(s - 1), get(s), get(s + 1), get(s + 2));
    (
        catmull_rom(a.0, b.0, c.0, d.0, t),
        catmull_rom(a.1, b.1, c.1, d.1, t),
    )
}

/// Seventeen smooth random curves. Each trajectory has a constant box size
/// drawn from `[0.2, 0.35]` and a center following a Catmull-Rom spline
/// through five random control points; output is a pure function of
/// `(n_frames, seed)`.
pub fn complex_trajectories(n_frames: usize, seed: u64) -> Result<Vec<BoxTrajectory>> {
    if n_frames < 2 {
        return Err(Error::validation("complex trajectories need at least 2 frames"));
    }
    const N_TRAJ: usize = 17;
    const N_CTRL: usize = 5;
    let mut out = Vec::with_capacity(N_TRAJ);
    for i in 0..N_TRAJ {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(i as u64));
        let w: f64 = rng.random_range(0.2..0.35);
        let h: f64 = rng.random_range(0.2..0.35);
        let ctrl: Vec<(f64, f64)> = (0..N_CTRL)
            .map(|_| {
                (
                    rng.random_range(w / 2.0..1.0 - w / 2.0),
                    rng.random_range(h / 2.0..1.0 - h / 2.0),
                )
            })
            .collect();
        let boxes = (0..n_frames)
            .map(|f| {
                let u = f as f64 / (n_frames - 1) as f64 * (N_CTRL - 1) as f64;
                let (cx, cy) = spline_at(&ctrl, u);
                BBox::centered(cx, cy, w, h)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(BoxTrajectory { boxes });
    }
    Ok(out)
}

/// Build a trajectory by linear interpolation of all four coordinates
/// between keyframes. Keyframe indices must be strictly increasing, start at
/// 0 and end at `n_frames - 1`.
pub fn interpolate_trajectory(keyframes: &[(usize, BBox)], n_frames: usize) -> Result<BoxTrajectory> {
    if keyframes.is_empty() || n_frames == 0 {
        return Err(Error::validation("need at least one keyframe and one frame"));
    }
    if keyframes[0].0 != 0 {
        return Err(Error::validation("first keyframe must be frame 0"));
    }
    if keyframes.last().unwrap().0 != n_frames - 1 {
        return Err(Error::validation(format!(
            "last keyframe must be frame {}",
            n_frames - 1
        )));
    }
    if keyframes.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::validation("keyframe indices must be strictly increasing"));
    }
    for (f, b) in keyframes {
        b.validate()
            .map_err(|e| Error::validation(format!("keyframe {f}: {e}")))?;
    }
    let mut boxes = Vec::with_capacity(n_frames);
    if keyframes.len() == 1 {
        boxes.push(keyframes[0].1);
    }
    for w in keyframes.windows(2) {
        let ((fa, a), (fb, b)) = (w[0], w[1]);
        let span = (fb - fa) as f64;
        for f in fa..fb {
            let s = (f - fa) as f64 / span;
            let lerp = |p: f64, q: f64| p + (q - p) * s;
            boxes.push(BBox {
                x1: lerp(a.x1, b.x1),
                y1: lerp(a.y1, b.y1),
                x2: lerp(a.x2, b.x2),
                y2: lerp(a.y2, b.y2),
            });
        }
    }
    if keyframes.len() > 1 {
        boxes.push(keyframes.last().unwrap().1);
    }
    BoxTrajectory::new(boxes)
}
