use std::fs;
use std::path::Path;

use msfrcnn::detection::Detection;
use msfrcnn::eval::{
    evaluate_dataset, match_detections, pr_curve_ap, roc_curve, EvalConfig, ImageAnnotation, ImageDetections, Split,
};
use msfrcnn::io::{parse_annotations, parse_detections};
use msfrcnn::BBox;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{bx, grid_box, oracle_ap, oracle_match};

#[test]
fn greedy_matching_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..200 {
        let dets: Vec<BBox> = (0..rng.random_range(0..=10)).map(|_| grid_box(&mut rng)).collect();
        let gts: Vec<BBox> = (0..rng.random_range(0..=5)).map(|_| grid_box(&mut rng)).collect();
        let m = match_detections(&dets, &gts, 0.5);
        let want = oracle_match(&dets, &gts, 0.5);
        assert_eq!(m.matched, want, "trial {trial}");
        assert_eq!(m.tp, want.iter().map(Option::is_some).collect::<Vec<_>>());
    }
}

#[test]
fn matching_examples() {
    let gt = bx(0.0, 0.0, 10.0, 10.0);
    assert_eq!(match_detections(&[gt], &[gt], 0.5).tp, vec![true]);
    assert_eq!(match_detections(&[gt, gt], &[gt], 0.5).tp, vec![true, false]);
    // IoU exactly 0.5 is not a hit.
    assert_eq!(match_detections(&[bx(0.0, 0.0, 10.0, 20.0)], &[gt], 0.5).tp, vec![false]);
}

#[test]
fn hand_derived_ap_fixture() {
    let c = pr_curve_ap(&[true, false, true], 2).unwrap();
    assert!((c.ap - 5.0 / 6.0).abs() < 1e-12);
    let p: Vec<f64> = c.points.iter().map(|x| x.1).collect();
    let r: Vec<f64> = c.points.iter().map(|x| x.0).collect();
    assert_eq!(r, vec![0.5, 0.5, 1.0]);
    assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12 && (p[2] - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(pr_curve_ap(&[true, true], 2).unwrap().ap, 1.0);
    assert_eq!(pr_curve_ap(&[], 2).unwrap().ap, 0.0);
    assert!(pr_curve_ap(&[false], 0).is_none());
}

#[test]
fn roc_examples() {
    assert_eq!(roc_curve(&[true, false, true], 2).unwrap(), vec![(0, 0.5), (1, 0.5), (1, 1.0)]);
    assert_eq!(roc_curve(&[true, true], 2).unwrap().last(), Some(&(0, 1.0)));
}

#[test]
fn ap_matches_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..50 {
        let len = rng.random_range(0..30);
        let flags: Vec<bool> = (0..len).map(|_| rng.random_bool(0.5)).collect();
        let tp = flags.iter().filter(|&&f| f).count();
        let n_gt = tp + rng.random_range(0..5);
        if n_gt == 0 {
            continue;
        }
        let got = pr_curve_ap(&flags, n_gt).unwrap().ap;
        assert!((got - oracle_ap(&flags, n_gt)).abs() < 1e-12, "trial {trial}: {flags:?}");
    }
}

fn ann(image: &str, boxes: Vec<BBox>) -> ImageAnnotation {
    ImageAnnotation {
        image: image.into(),
        boxes,
    }
}

fn dets(image: &str, d: Vec<(BBox, f64)>) -> ImageDetections {
    ImageDetections {
        image: image.into(),
        detections: d.into_iter().map(|(bbox, score)| Detection { bbox, score }).collect(),
    }
}

#[test]
fn dataset_edge_cases() {
    let cfg = EvalConfig::default();
    let anns = vec![
        ann("a", vec![bx(0.0, 0.0, 10.0, 10.0), bx(50.0, 50.0, 90.0, 90.0)]),
        ann("b", vec![bx(0.0, 0.0, 30.0, 100.0)]),
    ];
    let empty = evaluate_dataset(&[], &anns, &cfg).unwrap();
    for s in Split::ALL {
        assert_eq!(empty.split(s).ap(), Some(0.0));
    }
    let perfect: Vec<ImageDetections> = anns
        .iter()
        .map(|a| dets(&a.image, a.boxes.iter().map(|&b| (b, 0.9)).collect()))
        .collect();
    let r = evaluate_dataset(&perfect, &anns, &cfg).unwrap();
    for s in Split::ALL {
        assert_eq!(r.split(s).ap(), Some(1.0), "{s:?}");
    }
    let err = evaluate_dataset(&[dets("zzz", vec![])], &anns, &cfg).unwrap_err();
    assert!(err.to_string().contains("zzz"));
}

#[test]
fn golden_fixture_report_is_byte_identical() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden");
    let anns = parse_annotations(&dir.join("annotations.txt")).unwrap();
    let mut all = Vec::new();
    for a in &anns.records {
        let p = dir.join("dets").join(format!("{}.det", a.image));
        if let Ok(text) = fs::read_to_string(&p) {
            all.push(ImageDetections {
                image: a.image.clone(),
                detections: parse_detections(&text, &p.display().to_string()).unwrap(),
            });
        }
    }
    assert_eq!(anns.records.len(), 20);
    let report = evaluate_dataset(&all, &anns.records, &EvalConfig::default()).unwrap().to_text();
    let want = fs::read_to_string(dir.join("report.txt")).unwrap();
    assert_eq!(report, want);
}

fn arb_dataset() -> impl Strategy<Value = (Vec<ImageAnnotation>, Vec<ImageDetections>)> {
    let boxes = |n| {
        prop::collection::vec((0u8..40, 0u8..40, 4u8..80, 4u8..80), 0..n).prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h)| BBox::from_xywh(x as f64, y as f64, w as f64, h as f64).unwrap())
                .collect::<Vec<_>>()
        })
    };
    prop::collection::vec((boxes(4), boxes(6), prop::collection::vec(0.0..1.0f64, 6)), 1..5).prop_map(|imgs| {
        let mut a = Vec::new();
        let mut d = Vec::new();
        for (i, (g, dt, scores)) in imgs.into_iter().enumerate() {
            let name = format!("i{i}");
            a.push(ann(&name, g));
            d.push(dets(&name, dt.into_iter().zip(scores).collect()));
        }
        (a, d)
    })
}

proptest! {
    #[test]
    fn ap_invariant_under_monotone_score_transform((anns, ds) in arb_dataset()) {
        let cfg = EvalConfig::default();
        let base = evaluate_dataset(&ds, &anns, &cfg).unwrap();
        let warped: Vec<ImageDetections> = ds
            .iter()
            .map(|d| ImageDetections {
                image: d.image.clone(),
                detections: d.detections.iter().map(|x| Detection { score: (3.0 * x.score).exp() - 7.0, ..*x }).collect(),
            })
            .collect();
        let other = evaluate_dataset(&warped, &anns, &cfg).unwrap();
        for s in Split::ALL {
            prop_assert_eq!(base.split(s).ap(), other.split(s).ap());
        }
    }

    #[test]
    fn appending_zero_iou_detection_never_raises_ap((anns, mut ds) in arb_dataset()) {
        let cfg = EvalConfig::default();
        let before = evaluate_dataset(&ds, &anns, &cfg).unwrap();
        // Far from every annotated box, below every score.
        ds[0].detections.push(Detection { bbox: bx(500.0, 500.0, 540.0, 540.0), score: -1.0 });
        let after = evaluate_dataset(&ds, &anns, &cfg).unwrap();
        for s in Split::ALL {
            if let (Some(b), Some(a)) = (before.split(s).ap(), after.split(s).ap()) {
                prop_assert!(a <= b);
            }
        }
    }

    #[test]
    fn report_invariants((anns, ds) in arb_dataset()) {
        let r = evaluate_dataset(&ds, &anns, &EvalConfig::default()).unwrap();
        for s in Split::ALL {
            let sr = r.split(s);
            prop_assert!(sr.flags.iter().filter(|&&f| f).count() <= sr.n_gt);
            if let Some(pr) = &sr.pr {
                prop_assert!((0.0..=1.0).contains(&pr.ap));
                prop_assert!(pr.points.windows(2).all(|w| w[0].0 <= w[1].0));
            }
            if let Some(roc) = &sr.roc {
                prop_assert!(roc.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
            }
        }
    }
}
