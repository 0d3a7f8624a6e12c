//! Detection scoring under the discrete criterion: greedy IoU matching,
//! precision/recall with all-points interpolated AP, ROC-style curves and
//! difficulty splits by face height.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::boxes::{score_order, BBox};
use crate::detection::Detection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Faces shorter than this are small.
    pub small_max_height: f64,
    /// Faces at least this tall are large; the rest are medium.
    pub large_min_height: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            small_max_height: 24.0,
            large_min_height: 64.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold {} must lie in (0, 1)",
                self.iou_threshold
            )));
        }
        if !(self.small_max_height > 0.0 && self.small_max_height <= self.large_min_height) {
            return Err(Error::Config("split heights must satisfy 0 < small_max <= large_min".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, height: f64) -> Split {
        if height < self.small_max_height {
            Split::Small
        } else if height < self.large_min_height {
            Split::Medium
        } else {
            Split::Large
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Overall,
    Small,
    Medium,
    Large,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Overall, Split::Small, Split::Medium, Split::Large];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Overall => "overall",
            Split::Small => "small",
            Split::Medium => "medium",
            Split::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// One flag per detection, in the given order.
    pub tp: Vec<bool>,
    /// Index of the ground-truth box each detection claimed.
    pub matched: Vec<Option<usize>>,
}

/// Greedy matching. `dets` must already be in descending score order; each
/// claims the unmatched ground truth of highest IoU provided that IoU is
/// strictly above `iou_threshold` (ties go to the lower GT index).
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_threshold: f64) -> Matching {
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    let mut matched = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = d.iou(gt);
            if v > iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                tp.push(true);
                matched.push(Some(g));
            }
            None => {
                tp.push(false);
                matched.push(None);
            }
        }
    }
    Matching { tp, matched }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each detection.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Precision/recall over flags in global score order and all-points AP:
/// `Σ (r_i − r_{i−1}) · max_{j ≥ i} p_j`. `None` when `n_gt` is zero.
pub fn pr_curve_ap(flags: &[bool], n_gt: usize) -> Option<PrCurve> {
    if n_gt == 0 {
        return None;
    }
    let mut points = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * envelope[i];
        prev_recall = r;
    }
    Some(PrCurve { points, ap })
}

/// `(cumulative false positives, true-positive rate)` after each detection.
/// `None` when `n_gt` is zero.
pub fn roc_curve(flags: &[bool], n_gt: usize) -> Option<Vec<(usize, f64)>> {
    if n_gt == 0 {
        return None;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    Some(
        flags
            .iter()
            .map(|&f| {
                if f {
                    tp += 1;
                } else {
                    fp += 1;
                }
                (fp, tp as f64 / n_gt as f64)
            })
            .collect(),
    )
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageAnnotation {
    pub image: String,
    pub boxes: Vec<BBox>,
}

/// Detector output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub image: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitReport {
    pub split: Split,
    pub n_gt: usize,
    /// Detections counted in this split (true plus false positives).
    pub n_det: usize,
    /// Flags in global score order.
    pub flags: Vec<bool>,
    pub pr: Option<PrCurve>,
    pub roc: Option<Vec<(usize, f64)>>,
}

impl SplitReport {
    pub fn ap(&self) -> Option<f64> {
        self.pr.as_ref().map(|p| p.ap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub splits: Vec<SplitReport>,
}

impl EvalReport {
    pub fn split(&self, s: Split) -> &SplitReport {
        self.splits.iter().find(|r| r.split == s).expect("all splits present")
    }

    pub fn overall(&self) -> &SplitReport {
        self.split(Split::Overall)
    }

    /// Text report: `key=value` lines, then `[PR]` (`recall precision`) and
    /// `[ROC]` (`false_positives tpr`) tables for the overall split.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fmt_ap = |r: &SplitReport| match r.ap() {
            Some(ap) => format!("{ap:.6}"),
            None => "undefined".to_string(),
        };
        for split in Split::ALL {
            let _ = writeln!(s, "ap_{}={}", split.as_str(), fmt_ap(self.split(split)));
        }
        let o = self.overall();
        let _ = writeln!(s, "n_gt={}", o.n_gt);
        let _ = writeln!(s, "n_det={}", o.n_det);
        s.push_str("[PR]\n");
        for &(r, p) in o.pr.iter().flat_map(|c| c.points.iter()) {
            let _ = writeln!(s, "{r:.6} {p:.6}");
        }
        s.push_str("[ROC]\n");
        for &(fp, tpr) in o.roc.iter().flatten() {
            let _ = writeln!(s, "{fp} {tpr:.6}");
        }
        s
    }
}

/// Scores every image, sweeps detections globally by descending score (ties
/// by image order, then by order within the image) and reports overall and
/// per-split curves.
///
/// Matching is done once per image against all ground truth. In a split, a
/// detection matched to a face of another split is ignored; an unmatched
/// detection counts as a false positive only where its own height falls.
pub fn evaluate_dataset(
    detections: &[ImageDetections],
    annotations: &[ImageAnnotation],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let index: HashMap<&str, usize> = annotations
        .iter()
        .enumerate()
        .map(|(i, a)| (a.image.as_str(), i))
        .collect();
    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); annotations.len()];
    for d in detections {
        let &i = index
            .get(d.image.as_str())
            .ok_or_else(|| Error::UnknownImage(d.image.clone()))?;
        per_image[i].extend(d.detections.iter().copied());
    }

    struct Scored {
        score: f64,
        own: Split,
        matched: Option<Split>,
    }
    let mut all = Vec::new();
    for (img, dets) in per_image.iter().enumerate() {
        let order = score_order(&dets.iter().map(|d| d.score).collect::<Vec<_>>());
        let boxes: Vec<BBox> = order.iter().map(|&i| dets[i].bbox).collect();
        let gts = &annotations[img].boxes;
        let m = match_detections(&boxes, gts, cfg.iou_threshold);
        for (k, &i) in order.iter().enumerate() {
            all.push(Scored {
                score: dets[i].score,
                own: cfg.split_of(dets[i].bbox.height()),
                matched: m.matched[k].map(|g| cfg.split_of(gts[g].height())),
            });
        }
    }
    // Stable sort keeps image order, then within-image order, for ties.
    all.sort_by(|a, b| b.score.total_cmp(&a.score));

    let gt_splits: Vec<Split> = annotations
        .iter()
        .flat_map(|a| a.boxes.iter().map(|b| cfg.split_of(b.height())))
        .collect();
    let splits = Split::ALL
        .iter()
        .map(|&split| {
            let flags: Vec<bool> = if split == Split::Overall {
                all.iter().map(|d| d.matched.is_some()).collect()
            } else {
                all.iter()
                    .filter_map(|d| match d.matched {
                        Some(s) if s == split => Some(true),
                        Some(_) => None,
                        None => (d.own == split).then_some(false),
                    })
                    .collect()
            };
            let n_gt = if split == Split::Overall {
                gt_splits.len()
            } else {
                gt_splits.iter().filter(|&&s| s == split).count()
            };
            SplitReport {
                split,
                n_gt,
                n_det: flags.len(),
                pr: pr_curve_ap(&flags, n_gt),
                roc: roc_curve(&flags, n_gt),
                flags,
            }
        })
        .collect();
    Ok(EvalReport { splits })
}
