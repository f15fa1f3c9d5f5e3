//! Shifted temporal attention.
//!
//! Before each temporal-attention call, frame `f`'s box region `B^f` is moved
//! onto the first frame's box `B^0`, so the object occupies the same spatial
//! positions in every frame; after the call the move is undone.
//!
//! The move is a region exchange on grid cells: `src` content lands on `dst`
//! and the content displaced from `dst` fills the cells vacated in `src`.
//! With translation `d = dst − src`, a vacated cell `q` receives the value at
//! `q + k·d` for the smallest `k ≥ 1` that leaves `src`. For disjoint boxes
//! that is `k = 1`, a plain swap. Every translation orbit is rotated by one
//! position, so the map is a permutation and the opposite shift inverts it.

use std::cell::Cell;

use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::testbed::TemporalWrap;
use crate::trajectory::{BoxTrajectory, GridBox};

/// Per-frame shifts onto the first frame's box.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftPlan {
    pub sources: Vec<GridBox>,
    pub anchor: GridBox,
}

impl ShiftPlan {
    /// Plan for boxes on a `grid_w x grid_h` grid. Boxes whose shape differs
    /// from the anchor are replaced by an anchor-shaped box at the same center.
    pub fn new(boxes: &[GridBox], grid_w: usize, grid_h: usize) -> Result<Self> {
        let Some(&anchor) = boxes.first() else {
            return Err(Error::validation("shift plan needs at least one box"));
        };
        let sources = boxes
            .iter()
            .map(|b| {
                if !b.fits(grid_w, grid_h) {
                    return Err(Error::validation(format!("box {b:?} outside {grid_w}x{grid_h} grid")));
                }
                Ok(if (b.height(), b.width()) == (anchor.height(), anchor.width()) {
                    *b
                } else {
                    b.with_shape(anchor.height(), anchor.width(), grid_w, grid_h)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ShiftPlan { sources, anchor })
    }

    pub fn is_static(&self) -> bool {
        self.sources.iter().all(|b| *b == self.anchor)
    }
}

/// Row-major source index for every cell of an `h x w` grid under the shift.
fn source_map(src: GridBox, dst: GridBox, h: usize, w: usize) -> Vec<(usize, usize)> {
    let dr = dst.row_lo as isize - src.row_lo as isize;
    let dc = dst.col_lo as isize - src.col_lo as isize;
    let mut map: Vec<(usize, usize)> = (0..h * w).map(|i| (i / w, i % w)).collect();
    for r in 0..h {
        for c in 0..w {
            if dst.contains(r, c) {
                map[r * w + c] = ((r as isize - dr) as usize, (c as isize - dc) as usize);
            } else if src.contains(r, c) {
                let (mut rr, mut cc) = (r as isize + dr, c as isize + dc);
                while src.contains(rr as usize, cc as usize) {
                    rr += dr;
                    cc += dc;
                }
                map[r * w + c] = (rr as usize, cc as usize);
            }
        }
    }
    map
}

/// Exchange region `src` with region `dst` in a `(channels, H, W)` frame.
pub fn shift(frame: ArrayView3<f64>, src: GridBox, dst: GridBox) -> Result<Array3<f64>> {
    let (_, h, w) = frame.dim();
    if (src.height(), src.width()) != (dst.height(), dst.width()) {
        return Err(Error::validation(format!(
            "shift needs equal box shapes, got {}x{} and {}x{}",
            src.height(),
            src.width(),
            dst.height(),
            dst.width()
        )));
    }
    if !src.fits(w, h) || !dst.fits(w, h) {
        return Err(Error::validation(format!("shift boxes must lie inside the {w}x{h} grid")));
    }
    if src == dst {
        return Ok(frame.to_owned());
    }
    let map = source_map(src, dst, h, w);
    Ok(Array3::from_shape_fn(frame.raw_dim(), |(ch, r, c)| {
        let (sr, sc) = map[r * w + c];
        frame[[ch, sr, sc]]
    }))
}

fn shift_all(z: &Array4<f64>, plan: &ShiftPlan, forward: bool) -> Result<Array4<f64>> {
    let mut out = z.clone();
    for (f, src) in plan.sources.iter().enumerate() {
        let (a, b) = if forward { (*src, plan.anchor) } else { (plan.anchor, *src) };
        if a != b {
            let moved = shift(z.index_axis(Axis(0), f), a, b)?;
            out.index_axis_mut(Axis(0), f).assign(&moved);
        }
    }
    Ok(out)
}

/// Shift every frame onto the anchor box, apply `attend`, shift back.
/// `z` has layout `(frames, channels, H, W)`.
pub fn shifted_temporal_attention(
    z: &Array4<f64>,
    boxes: &[GridBox],
    attend: &dyn Fn(&Array4<f64>) -> Array4<f64>,
) -> Result<Array4<f64>> {
    let (nf, _, h, w) = z.dim();
    if boxes.len() != nf {
        return Err(Error::validation(format!("{} boxes for {nf} frames", boxes.len())));
    }
    let plan = ShiftPlan::new(boxes, w, h)?;
    if plan.is_static() {
        return Ok(attend(z));
    }
    let aligned = shift_all(z, &plan, true)?;
    let attended = attend(&aligned);
    if attended.dim() != z.dim() {
        return Err(Error::Internal("temporal attention changed the feature shape".into()));
    }
    shift_all(&attended, &plan, false)
}

/// Temporal-attention wrapper that quantizes a trajectory onto each feature
/// grid it sees. Counts its invocations.
#[derive(Debug)]
pub struct Stam {
    trajectory: BoxTrajectory,
    calls: Cell<usize>,
}

impl Stam {
    pub fn new(trajectory: BoxTrajectory) -> Self {
        Stam { trajectory, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl TemporalWrap for Stam {
    fn wrap(&self, features: &Array4<f64>, attend: &dyn Fn(&Array4<f64>) -> Array4<f64>) -> Array4<f64> {
        self.calls.set(self.calls.get() + 1);
        let (_, _, h, w) = features.dim();
        let boxes = self.trajectory.quantize(w, h);
        // Frame count is validated by the pipeline before sampling starts.
        shifted_temporal_attention(features, &boxes, attend).expect("trajectory matches frame count")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((1, h, w), |(_, r, c)| (r * w + c) as f64)
    }

    #[test]
    fn identity_when_src_is_dst() {
        let g = grid(4, 4);
        let b = GridBox::new(1, 1, 3, 3);
        assert_eq!(shift(g.view(), b, b).unwrap(), g);
    }

    #[test]
    fn disjoint_blocks_swap_exactly() {
        let g = grid(4, 4);
        // top-left 2x2 <-> bottom-right 2x2
        let out = shift(g.view(), GridBox::new(0, 0, 2, 2), GridBox::new(2, 2, 4, 4)).unwrap();
        let expect = [
            [10.0, 11.0, 2.0, 3.0],
            [14.0, 15.0, 6.0, 7.0],
            [8.0, 9.0, 0.0, 1.0],
            [12.0, 13.0, 4.0, 5.0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(out[[0, r, c]], expect[r][c], "cell ({r},{c})");
            }
        }
    }

    #[test]
    fn overlapping_shift_rotates_orbits() {
        // 1x5 strip, box of width 3 moved right by 1: [a b c d e] -> [d a b c e]
        let g = Array3::from_shape_vec((1, 1, 5), vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = shift(g.view(), GridBox::new(0, 0, 3, 1), GridBox::new(1, 0, 4, 1)).unwrap();
        assert_eq!(out.iter().copied().collect::<Vec<_>>(), vec![3.0, 0.0, 1.0, 2.0, 4.0]);
        let back = shift(out.view(), GridBox::new(1, 0, 4, 1), GridBox::new(0, 0, 3, 1)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = grid(4, 4);
        assert!(shift(g.view(), GridBox::new(0, 0, 2, 2), GridBox::new(0, 0, 3, 2)).is_err());
        assert!(shift(g.view(), GridBox::new(0, 0, 2, 2), GridBox::new(3, 3, 5, 5)).is_err());
    }

    #[test]
    fn moving_box_with_frame_mean_matches_hand_oracle() {
        // 3 frames, 1 channel, 4x4; 2x2 box moves one cell right per frame.
        let z = Array4::from_shape_fn((3, 1, 4, 4), |(f, _, r, c)| (100 * f + 4 * r + c) as f64);
        let boxes = [GridBox::new(0, 1, 2, 3), GridBox::new(1, 1, 3, 3), GridBox::new(2, 1, 4, 3)];
        let mean = |x: &Array4<f64>| {
            let m = x.mean_axis(Axis(0)).unwrap();
            let mut out = x.clone();
            for mut frame in out.outer_iter_mut() {
                frame.assign(&m);
            }
            out
        };
        let out = shifted_temporal_attention(&z, &boxes, &mean).unwrap();
        // object cells: each frame's box content is the frame-mean of the
        // aligned box contents, placed back at that frame's box
        for (f, b) in boxes.iter().enumerate() {
            for dr in 0..2 {
                for dc in 0..2 {
                    let expect = (0..3)
                        .map(|g| z[[g, 0, boxes[g].row_lo + dr, boxes[g].col_lo + dc]])
                        .sum::<f64>()
                        / 3.0;
                    assert_eq!(out[[f, 0, b.row_lo + dr, b.col_lo + dc]], expect);
                }
            }
        }
        // rows 0 and 3 are never moved: plain mean over frames
        for r in [0, 3] {
            for c in 0..4 {
                let expect = (0..3).map(|g| z[[g, 0, r, c]]).sum::<f64>() / 3.0;
                assert_eq!(out[[1, 0, r, c]], expect);
            }
        }
    }

    #[test]
    fn static_and_identity_cases() {
        let z = Array4::from_shape_fn((3, 2, 5, 5), |(f, c, r, w)| ((f * 7 + c * 3 + r * 5 + w) % 11) as f64);
        let b = GridBox::new(1, 1, 3, 4);
        let doubled = |x: &Array4<f64>| x * 2.0;
        assert_eq!(shifted_temporal_attention(&z, &[b; 3], &doubled).unwrap(), doubled(&z));
        let moving = [b, GridBox::new(2, 1, 4, 4), GridBox::new(2, 0, 4, 3)];
        let id = |x: &Array4<f64>| x.clone();
        assert_eq!(shifted_temporal_attention(&z, &moving, &id).unwrap(), z);
        assert!(shifted_temporal_attention(&z, &moving[..2], &id).is_err());
    }

    #[test]
    fn plan_aligns_unequal_shapes() {
        let plan = ShiftPlan::new(&[GridBox::new(0, 0, 2, 2), GridBox::new(4, 4, 8, 8)], 8, 8).unwrap();
        assert_eq!(plan.sources[1], GridBox::new(5, 5, 7, 7));
    }

    fn arb_pair(h: usize, w: usize) -> impl Strategy<Value = (GridBox, GridBox)> {
        (1..=h, 1..=w).prop_flat_map(move |(bh, bw)| {
            (0..=h - bh, 0..=w - bw, 0..=h - bh, 0..=w - bw).prop_map(move |(r0, c0, r1, c1)| {
                (GridBox::new(c0, r0, c0 + bw, r0 + bh), GridBox::new(c1, r1, c1 + bw, r1 + bh))
            })
        })
    }

    proptest! {
        #[test]
        fn shift_is_an_invertible_permutation((a, b) in arb_pair(7, 9), seed in 0u64..1000) {
            let g = Array3::from_shape_fn((2, 7, 9), |(c, r, w)| {
                ((seed as usize * 31 + c * 101 + r * 13 + w * 7) % 97) as f64 + 0.5
            });
            let s = shift(g.view(), a, b).unwrap();
            let back = shift(s.view(), b, a).unwrap();
            prop_assert_eq!(&back, &g);
            for ch in 0..2 {
                let mut x: Vec<f64> = g.index_axis(Axis(0), ch).iter().copied().collect();
                let mut y: Vec<f64> = s.index_axis(Axis(0), ch).iter().copied().collect();
                x.sort_by(f64::total_cmp);
                y.sort_by(f64::total_cmp);
                prop_assert_eq!(x, y);
            }
            // src content lands on dst
            prop_assert_eq!(
                s.slice(s![.., b.row_lo..b.row_hi, b.col_lo..b.col_hi]),
                g.slice(s![.., a.row_lo..a.row_hi, a.col_lo..a.col_hi])
            );
        }
    }
}
