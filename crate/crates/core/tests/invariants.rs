use ndarray::Array2;
use proptest::prelude::*;
use trajguide::evaluation::{control_metrics, control_metrics_with, iou, Detection, MetricOptions};
use trajguide::spatial::{loss_center, loss_inside, loss_outside, top_p_mean, TopP};
use trajguide::trajectory::{build_mask, BBox, BoxTrajectory, GridBox};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, fw, fh)| {
        let x2 = x + (1.0 - x) * fw;
        let y2 = y + (1.0 - y) * fh;
        BBox::new(x, y, x2.max(x + 1e-3), y2.max(y + 1e-3)).unwrap()
    })
}

fn detection() -> impl Strategy<Value = Detection> {
    prop_oneof![
        1 => Just(Detection::missing()),
        4 => (bbox(), 0.0..1.0f64).prop_map(|(b, c)| Detection::found(b, c).unwrap()),
    ]
}

fn frames() -> impl Strategy<Value = (Vec<BBox>, Vec<Detection>)> {
    (1usize..12).prop_flat_map(|n| (prop::collection::vec(bbox(), n), prop::collection::vec(detection(), n)))
}

fn grid_case() -> impl Strategy<Value = (Array2<f64>, GridBox)> {
    (3usize..10, 3usize..10)
        .prop_flat_map(|(h, w)| {
            (
                prop::collection::vec(0.0..1.0f64, h * w),
                0..h,
                0..w,
                1..=h,
                1..=w,
                Just((h, w)),
            )
        })
        .prop_map(|(vals, r, c, bh, bw, (h, w))| {
            let map = Array2::from_shape_vec((h, w), vals).unwrap();
            let (bh, bw) = (bh.min(h - r), bw.min(w - c));
            (map, GridBox::new(c, r, c + bw, r + bh))
        })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_frame_order((gt, dets) in frames(), rot in 0usize..12) {
        let n = gt.len();
        let k = rot % n;
        let (mut gt2, mut dets2) = (gt.clone(), dets.clone());
        gt2.rotate_left(k);
        dets2.rotate_left(k);
        let a = control_metrics(&dets, &BoxTrajectory::new(gt).unwrap()).unwrap();
        let b = control_metrics(&dets2, &BoxTrajectory::new(gt2).unwrap()).unwrap();
        prop_assert_eq!(a.coverage, b.coverage);
        prop_assert_eq!(a.ap50_all_frames, b.ap50_all_frames);
        match (a.miou, b.miou) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn ap_falls_as_threshold_rises((gt, dets) in frames(), lo in 0.0..1.0f64, hi in 0.0..1.0f64) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let traj = BoxTrajectory::new(gt).unwrap();
        let at = |th| control_metrics_with(&dets, &traj, MetricOptions { iou_threshold: th, frame_size: None }).unwrap();
        let (a, b) = (at(lo), at(hi));
        prop_assert!(a.ap50_all_frames >= b.ap50_all_frames);
        prop_assert!(a.ap50.unwrap_or(0.0) >= b.ap50.unwrap_or(0.0));
        prop_assert!((0.0..=1.0).contains(&a.coverage));
    }

    #[test]
    fn top_p_mean_lies_between_extremes(vals in prop::collection::vec(-5.0..5.0f64, 1..64), p in 1usize..80) {
        let m = top_p_mean(&vals, p).unwrap();
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        let min = vals.iter().cloned().fold(f64::MAX, f64::min);
        prop_assert!(m <= max + 1e-12);
        prop_assert!(m >= min - 1e-12);
    }

    #[test]
    fn region_losses_are_bounded((map, gb) in grid_case()) {
        let (h, w) = map.dim();
        let mask = build_mask(gb, w, h).unwrap();
        let p = TopP::Fraction(0.2).resolve(gb.area());
        let li = loss_inside(map.view(), &mask, p).unwrap();
        let lo = loss_outside(map.view(), &mask, p).unwrap();
        // Maps take values in [0, 1), so both top-P means do too.
        prop_assert!(li > 0.0 && li <= 1.0);
        prop_assert!((0.0..1.0).contains(&lo));
        if map.sum() > 0.0 {
            prop_assert!(loss_center(map.view(), &gb).unwrap() >= 0.0);
        }
    }
}
