use msfrcnn::boxes::{clip_box, decode_deltas, encode_deltas, iou, nms, project_roi, Deltas};
use msfrcnn::BBox;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{bx, oracle_nms, random_box};

/// Pixel-count IoU for boxes with integer corners.
fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let (lo_x, lo_y) = (a[0].min(b[0]), a[1].min(b[1]));
    let (hi_x, hi_y) = (a[2].max(b[2]), a[3].max(b[3]));
    let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

#[test]
fn iou_half_overlap_matches_raster() {
    let v = iou(&bx(0.0, 0.0, 10.0, 10.0), &bx(5.0, 0.0, 15.0, 10.0));
    assert!((v - raster_iou([0, 0, 10, 10], [5, 0, 15, 10])).abs() < 1e-12);
    assert!((v - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn iou_integer_boxes_match_raster() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let mut r = || {
            let x = rng.random_range(0..20i64);
            let y = rng.random_range(0..20i64);
            [x, y, x + rng.random_range(1..12i64), y + rng.random_range(1..12i64)]
        };
        let (a, b) = (r(), r());
        let f = |q: [i64; 4]| bx(q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64);
        assert!((iou(&f(a), &f(b)) - raster_iou(a, b)).abs() < 1e-12, "{a:?} {b:?}");
    }
}

#[test]
fn delta_examples() {
    let a = bx(0.0, 0.0, 10.0, 10.0);
    assert_eq!(encode_deltas(&a, &a).to_array(), [0.0; 4]);
    let wide = bx(-5.0, 0.0, 15.0, 10.0);
    let d = encode_deltas(&wide, &a);
    assert!((d.tw - 2f64.ln()).abs() < 1e-12 && d.tx.abs() < 1e-12 && d.ty.abs() < 1e-12 && d.th.abs() < 1e-12);
    let back = decode_deltas(&Deltas::from_slice(&[0.0, 0.0, 2f64.ln(), 0.0]), &a);
    for (x, y) in back.to_array().iter().zip(wide.to_array()) {
        assert!((x - y).abs() < 1e-12);
    }
    let huge = decode_deltas(&Deltas::from_slice(&[0.0, 0.0, 50.0, 50.0]), &a);
    assert!(huge.to_array().iter().all(|v| v.is_finite()));
    assert!((huge.width() - 10_000.0).abs() < 1e-6);
}

#[test]
fn encode_decode_round_trip_ten_thousand_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let t = random_box(&mut rng, 500.0, 300.0);
        let a = random_box(&mut rng, 500.0, 300.0);
        let back = decode_deltas(&encode_deltas(&t, &a), &a);
        for (x, y) in back.to_array().iter().zip(t.to_array()) {
            assert!((x - y).abs() < 1e-9, "{t:?} via {a:?} gave {back:?}");
        }
    }
}

#[test]
fn clip_examples() {
    let inner = bx(10.0, 10.0, 20.0, 30.0);
    assert_eq!(clip_box(&inner, 100.0, 100.0), Some(inner));
    assert_eq!(clip_box(&bx(-5.0, -5.0, 5.0, 5.0), 100.0, 100.0), Some(bx(0.0, 0.0, 5.0, 5.0)));
    assert_eq!(clip_box(&bx(120.0, 5.0, 130.0, 15.0), 100.0, 100.0), None);
    assert_eq!(clip_box(&bx(99.5, 5.0, 130.0, 15.0), 100.0, 100.0), None);
}

#[test]
fn nms_hand_example() {
    let boxes = [
        (bx(0.0, 0.0, 10.0, 10.0), 0.9),
        (bx(1.0, 1.0, 11.0, 11.0), 0.8),
        (bx(20.0, 20.0, 30.0, 30.0), 0.7),
    ];
    assert!((iou(&boxes[0].0, &boxes[1].0) - 81.0 / 119.0).abs() < 1e-12);
    assert_eq!(nms(&boxes, 0.5), vec![0, 2]);
    assert_eq!(nms(&boxes[..1], 0.5), vec![0]);
}

#[test]
fn nms_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let n = rng.random_range(1..=200);
        let boxes: Vec<(BBox, f64)> = (0..n)
            .map(|_| {
                // Coarse scores force ties.
                let s = (rng.random_range(0..20) as f64) / 20.0;
                (random_box(&mut rng, 150.0, 60.0), s)
            })
            .collect();
        let thr = [0.3, 0.5, 0.7][trial % 3];
        let kept = nms(&boxes, thr);
        assert_eq!(kept, oracle_nms(&boxes, thr), "trial {trial}");
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                assert!(iou(&boxes[a].0, &boxes[b].0) <= thr);
            }
        }
    }
}

#[test]
fn projection_examples() {
    let r = project_roi(&bx(16.0, 32.0, 80.0, 96.0), 16);
    assert_eq!((r.width(), r.height()), (4, 4));
    let r = project_roi(&bx(18.0, 18.0, 30.0, 30.0), 16);
    assert_eq!((r.width(), r.height()), (1, 1));
    let r = project_roi(&bx(2.5, 3.0, 7.2, 9.9), 1);
    assert_eq!((r.x1, r.y1, r.x2, r.y2), (2, 3, 8, 10));
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (-50.0..200.0f64, -50.0..200.0f64, 0.5..120.0f64, 0.5..120.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        if a != b {
            prop_assert!(ab < 1.0);
        }
    }

    #[test]
    fn nms_output_is_antichain(boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..60), thr in 0.1..0.9f64) {
        let kept = nms(&boxes, thr);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(iou(&boxes[a].0, &boxes[b].0) <= thr);
            }
        }
    }

    #[test]
    fn projection_covers_at_least_one_cell(b in arb_box(), stride in prop::sample::select(vec![1usize, 4, 8, 16])) {
        let r = project_roi(&b, stride);
        prop_assert!(r.width() >= 1 && r.height() >= 1);
    }
}
