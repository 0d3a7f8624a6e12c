//! Region proposal network over the fused feature map.
//!
//! Anchor index `a` within a cell enumerates ratios in the outer loop and
//! scales in the inner loop. The score head emits channel pair `(2a, 2a+1)`
//! = (background, face) for anchor `a`, and the delta head channels
//! `4a..4a+4` = `(tx, ty, tw, th)`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::boxes::{clip_box, decode_deltas, encode_deltas, iou, nms, score_order, BBox, Deltas};
use crate::error::{Error, Result};
use crate::layers::{conv2d, conv2d_backward, relu, relu_backward, Conv2d, ConvGrads};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub base_stride: usize,
    pub scales: Vec<f64>,
    /// Height over width.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            base_stride: 16,
            scales: vec![2.0, 4.0, 8.0, 16.0],
            ratios: vec![1.0, 1.3],
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Anchors over a `feat_h × feat_w` grid: row-major over cells, then ratios,
/// then scales. Anchors may extend past the image.
pub fn generate_anchors(feat_h: usize, feat_w: usize, cfg: &AnchorConfig) -> Vec<BBox> {
    let stride = cfg.base_stride as f64;
    let mut shapes = Vec::with_capacity(cfg.per_cell());
    for &r in &cfg.ratios {
        for &s in &cfg.scales {
            let area = (s * stride).powi(2);
            let w = (area / r).sqrt();
            shapes.push((w, w * r));
        }
    }
    let mut anchors = Vec::with_capacity(feat_h * feat_w * shapes.len());
    for i in 0..feat_h {
        for j in 0..feat_w {
            let cx = (j as f64 + 0.5) * stride;
            let cy = (i as f64 + 0.5) * stride;
            for &(w, h) in &shapes {
                anchors.push(BBox {
                    x1: cx - 0.5 * w,
                    y1: cy - 0.5 * h,
                    x2: cx + 0.5 * w,
                    y2: cy + 0.5 * h,
                });
            }
        }
    }
    anchors
}

/// 3×3 conv + ReLU, then sibling 1×1 score and delta convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    pub conv: Conv2d,
    pub cls: Conv2d,
    pub bbox: Conv2d,
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `N×2k×H×W`.
    pub logits: Tensor,
    /// `N×4k×H×W`.
    pub deltas: Tensor,
}

#[derive(Debug, Clone)]
pub struct RpnCache {
    input: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct RpnGrads {
    pub input: Tensor,
    pub conv: ConvGrads,
    pub cls: ConvGrads,
    pub bbox: ConvGrads,
}

impl RpnHead {
    pub fn new<R: Rng + ?Sized>(in_c: usize, hidden: usize, anchors_per_cell: usize, rng: &mut R) -> Self {
        RpnHead {
            conv: Conv2d::glorot(in_c, hidden, 3, rng),
            cls: Conv2d::glorot(hidden, 2 * anchors_per_cell, 1, rng),
            bbox: Conv2d::glorot(hidden, 4 * anchors_per_cell, 1, rng),
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.cls.out_channels() / 2
    }

    pub fn forward(&self, fused: &Tensor) -> Result<(RpnOutput, RpnCache)> {
        let hidden_pre = conv2d(fused, &self.conv)?;
        let hidden = relu(&hidden_pre);
        let logits = conv2d(&hidden, &self.cls)?;
        let deltas = conv2d(&hidden, &self.bbox)?;
        Ok((
            RpnOutput { logits, deltas },
            RpnCache {
                input: fused.clone(),
                hidden_pre,
                hidden,
            },
        ))
    }

    pub fn backward(&self, cache: &RpnCache, d_logits: &Tensor, d_deltas: &Tensor) -> Result<RpnGrads> {
        let cls = conv2d_backward(&cache.hidden, &self.cls, d_logits, true)?;
        let bbox = conv2d_backward(&cache.hidden, &self.bbox, d_deltas, true)?;
        let d_hidden = cls.input.as_ref().unwrap().add(bbox.input.as_ref().unwrap())?;
        let d_pre = relu_backward(&cache.hidden_pre, &d_hidden);
        let conv = conv2d_backward(&cache.input, &self.conv, &d_pre, true)?;
        Ok(RpnGrads {
            input: conv.input.clone().unwrap(),
            conv,
            cls,
            bbox,
        })
    }

    pub fn accumulate(&mut self, g: &RpnGrads) {
        self.conv.accumulate(&g.conv);
        self.cls.accumulate(&g.cls);
        self.bbox.accumulate(&g.bbox);
    }
}

/// Per-anchor `(background, face)` logits from the `1×2k×H×W` score map,
/// in anchor enumeration order.
pub fn anchor_logits(logits: &Tensor) -> Result<Vec<[f64; 2]>> {
    let (n, c, h, w) = logits.dims4()?;
    if n != 1 || c % 2 != 0 {
        return Err(Error::invalid("rpn", format!("bad score map shape {:?}", logits.shape())));
    }
    let k = c / 2;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(hw * k);
    for s in 0..hw {
        for a in 0..k {
            out.push([d[(2 * a) * hw + s], d[(2 * a + 1) * hw + s]]);
        }
    }
    Ok(out)
}

/// Per-anchor deltas from the `1×4k×H×W` delta map, in anchor order.
pub fn anchor_deltas(deltas: &Tensor) -> Result<Vec<Deltas>> {
    let (n, c, h, w) = deltas.dims4()?;
    if n != 1 || c % 4 != 0 {
        return Err(Error::invalid("rpn", format!("bad delta map shape {:?}", deltas.shape())));
    }
    let k = c / 4;
    let hw = h * w;
    let d = deltas.data();
    let mut out = Vec::with_capacity(hw * k);
    for s in 0..hw {
        for a in 0..k {
            let at = |j: usize| d[(4 * a + j) * hw + s];
            out.push(Deltas {
                tx: at(0),
                ty: at(1),
                tw: at(2),
                th: at(3),
            });
        }
    }
    Ok(out)
}

/// Linear offset in the score map of channel `j ∈ {0, 1}` for `anchor`.
pub(crate) fn logit_offset(anchor: usize, j: usize, k: usize, hw: usize) -> usize {
    let (s, a) = (anchor / k, anchor % k);
    (2 * a + j) * hw + s
}

/// Linear offset in the delta map of coordinate `j ∈ 0..4` for `anchor`.
pub(crate) fn delta_offset(anchor: usize, j: usize, k: usize, hw: usize) -> usize {
    let (s, a) = (anchor / k, anchor % k);
    (4 * a + j) * hw + s
}

/// Face probability from a `(background, face)` logit pair.
pub fn face_probability(pair: [f64; 2]) -> f64 {
    1.0 / (1.0 + (pair[0] - pair[1]).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub nms_thresh: f64,
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_top_n: 2000,
            post_nms_top_n: 300,
            nms_thresh: 0.7,
            min_size: 4.0,
        }
    }
}

/// Scores, decodes, clips, filters and suppresses anchors into proposals.
/// Equal scores keep anchor order.
pub fn propose(
    logits: &Tensor,
    deltas: &Tensor,
    anchors: &[BBox],
    img_w: f64,
    img_h: f64,
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    let scores = anchor_logits(logits)?;
    let offsets = anchor_deltas(deltas)?;
    if scores.len() != anchors.len() || offsets.len() != anchors.len() {
        return Err(Error::invalid(
            "propose",
            format!("{} anchors but {} score pairs, {} deltas", anchors.len(), scores.len(), offsets.len()),
        ));
    }
    let mut cands: Vec<(BBox, f64)> = Vec::with_capacity(anchors.len());
    for ((anchor, pair), d) in anchors.iter().zip(&scores).zip(&offsets) {
        let decoded = decode_deltas(d, anchor);
        if let Some(b) = clip_box(&decoded, img_w, img_h) {
            if b.width() >= cfg.min_size && b.height() >= cfg.min_size {
                cands.push((b, face_probability(*pair)));
            }
        }
    }
    let order = score_order(&cands.iter().map(|c| c.1).collect::<Vec<_>>());
    let top: Vec<(BBox, f64)> = order.iter().take(cfg.pre_nms_top_n).map(|&i| cands[i]).collect();
    let keep = nms(&top, cfg.nms_thresh);
    Ok(keep
        .into_iter()
        .take(cfg.post_nms_top_n)
        .map(|i| Proposal {
            bbox: top[i].0,
            objectness: top[i].1,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnTargetConfig {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub batch_size: usize,
    pub positive_fraction: f64,
}

impl Default for RpnTargetConfig {
    fn default() -> Self {
        RpnTargetConfig {
            positive_iou: 0.7,
            negative_iou: 0.3,
            batch_size: 256,
            positive_fraction: 0.5,
        }
    }
}

/// Labels are `1` (positive), `0` (negative) or `-1` (ignored).
#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<i8>,
    /// Regression targets; meaningful only where `labels == 1`.
    pub deltas: Vec<Deltas>,
}

impl RpnTargets {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn sampled(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).count()
    }
}

/// Labels anchors against ground truth and subsamples them.
///
/// Anchors crossing the image border are ignored. Among the rest, an anchor
/// is positive when its IoU with some box reaches `positive_iou` or when it
/// is the best anchor for some box (ties included), negative when its best
/// IoU is at most `negative_iou`.
pub fn assign_rpn_targets<R: Rng + ?Sized>(
    anchors: &[BBox],
    gt_boxes: &[BBox],
    img_w: f64,
    img_h: f64,
    cfg: &RpnTargetConfig,
    rng: &mut R,
) -> Result<RpnTargets> {
    let n = anchors.len();
    let mut labels = vec![-1i8; n];
    let inside: Vec<usize> = (0..n).filter(|&i| anchors[i].inside(img_w, img_h)).collect();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![0usize; n];
    let mut gt_best = vec![0.0f64; gt_boxes.len()];
    for &i in &inside {
        for (g, gt) in gt_boxes.iter().enumerate() {
            let v = iou(&anchors[i], gt);
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = g;
            }
            gt_best[g] = gt_best[g].max(v);
        }
    }
    for &i in &inside {
        if best_iou[i] <= cfg.negative_iou {
            labels[i] = 0;
        }
    }
    for &i in &inside {
        for (g, gt) in gt_boxes.iter().enumerate() {
            if gt_best[g] > 0.0 && iou(&anchors[i], gt) == gt_best[g] {
                labels[i] = 1;
            }
        }
        if best_iou[i] >= cfg.positive_iou {
            labels[i] = 1;
        }
    }

    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let max_pos = (cfg.batch_size as f64 * cfg.positive_fraction).floor() as usize;
    if pos.len() > max_pos {
        pos.shuffle(rng);
        for &i in &pos[max_pos..] {
            labels[i] = -1;
        }
        pos.truncate(max_pos);
    }
    let mut neg: Vec<usize> = (0..n).filter(|&i| labels[i] == 0).collect();
    let max_neg = cfg.batch_size - pos.len();
    if neg.len() > max_neg {
        neg.shuffle(rng);
        for &i in &neg[max_neg..] {
            labels[i] = -1;
        }
    }
    if pos.is_empty() && labels.iter().all(|&l| l != 0) {
        return Err(Error::invalid("assign_rpn_targets", "no positive or negative anchors to sample"));
    }

    let deltas = (0..n)
        .map(|i| {
            if labels[i] == 1 {
                encode_deltas(&gt_boxes[best_gt[i]], &anchors[i])
            } else {
                Deltas::default()
            }
        })
        .collect();
    Ok(RpnTargets { labels, deltas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_count_and_order() {
        let cfg = AnchorConfig {
            base_stride: 16,
            scales: vec![1.0, 2.0, 4.0],
            ratios: vec![0.5, 1.0, 2.0],
        };
        let a = generate_anchors(10, 10, &cfg);
        assert_eq!(a.len(), 900);
        // ratio 1, scale 2 is index 4 in the cell
        let sq = a[4];
        assert!((sq.width() - 32.0).abs() < 1e-12 && (sq.height() - 32.0).abs() < 1e-12);
        assert_eq!(sq.center(), (8.0, 8.0));
        for t in 0..9 {
            let below = a[10 * 9 + t];
            assert!((below.y1 - a[t].y1 - 16.0).abs() < 1e-12);
            assert_eq!(below.x1, a[t].x1);
        }
    }

    #[test]
    fn anchor_geometry_matches_config() {
        let cfg = AnchorConfig::default();
        for (idx, b) in generate_anchors(1, 1, &cfg).iter().enumerate() {
            let r = cfg.ratios[idx / cfg.scales.len()];
            let s = cfg.scales[idx % cfg.scales.len()];
            assert!((b.area() - (s * 16.0).powi(2)).abs() < 1e-9);
            assert!((b.height() / b.width() - r).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_even_objectness() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = RpnHead::new(4, 6, 2, &mut rng);
        head.cls.weight = Tensor::zeros(head.cls.weight.shape());
        let x = Tensor::uniform(&[1, 4, 3, 5], -1.0, 1.0, &mut rng);
        let (out, _) = head.forward(&x).unwrap();
        assert_eq!(out.logits.shape(), &[1, 4, 3, 5]);
        assert_eq!(out.deltas.shape(), &[1, 8, 3, 5]);
        for pair in anchor_logits(&out.logits).unwrap() {
            assert_eq!(face_probability(pair), 0.5);
        }
    }

    #[test]
    fn equal_scores_keep_anchor_order() {
        let anchors: Vec<BBox> = (0..4)
            .map(|i| BBox::from_xywh(20.0 * i as f64, 0.0, 10.0, 10.0).unwrap())
            .collect();
        // 2×2 grid with one anchor per cell
        let logits = Tensor::zeros(&[1, 2, 2, 2]);
        let deltas = Tensor::zeros(&[1, 4, 2, 2]);
        let props = propose(&logits, &deltas, &anchors, 100.0, 100.0, &ProposalConfig::default()).unwrap();
        let xs: Vec<f64> = props.iter().map(|p| p.bbox.x1).collect();
        assert_eq!(xs, vec![0.0, 20.0, 40.0, 60.0]);
    }

    #[test]
    fn dominant_anchor_comes_first() {
        let anchors: Vec<BBox> = (0..4)
            .map(|i| BBox::from_xywh(30.0 * i as f64 - 5.0, 0.0, 20.0, 20.0).unwrap())
            .collect();
        let mut logits = Tensor::zeros(&[1, 2, 2, 2]);
        logits.data_mut()[4] = 5.0; // face channel, cell 0
        let deltas = Tensor::zeros(&[1, 4, 2, 2]);
        let props = propose(&logits, &deltas, &anchors, 100.0, 100.0, &ProposalConfig::default()).unwrap();
        assert_eq!(props[0].bbox, BBox::new(0.0, 0.0, 15.0, 20.0).unwrap());
    }

    #[test]
    fn identical_anchor_is_positive_with_zero_deltas() {
        let anchors = generate_anchors(4, 4, &AnchorConfig {
            base_stride: 16,
            scales: vec![2.0],
            ratios: vec![1.0],
        });
        let gt = anchors[5];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = assign_rpn_targets(&anchors, &[gt], 64.0, 64.0, &RpnTargetConfig::default(), &mut rng).unwrap();
        assert_eq!(t.labels[5], 1);
        assert_eq!(t.deltas[5], Deltas::default());
    }

    #[test]
    fn best_anchor_rule_and_negative_threshold() {
        // single 32×32 anchor per cell on a 4×4 grid of a 64×64 image
        let anchors = generate_anchors(4, 4, &AnchorConfig {
            base_stride: 16,
            scales: vec![2.0],
            ratios: vec![1.0],
        });
        // Anchor 5 is (8,8)-(40,40). A 20×20 box at (14,14): IoU = 400/1024.
        let gt = BBox::from_xywh(14.0, 14.0, 20.0, 20.0).unwrap();
        let best = anchors.iter().map(|a| iou(a, &gt)).fold(0.0, f64::max);
        assert!((best - 400.0 / 1024.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = assign_rpn_targets(&anchors, &[gt], 64.0, 64.0, &RpnTargetConfig::default(), &mut rng).unwrap();
        assert_eq!(t.labels[5], 1);
        // Anchor 10 is (24,24)-(56,56): overlap 10×10 = 100 → IoU 100/1224 ≈ 0.08.
        assert!(iou(&anchors[10], &gt) < 0.3);
        assert_eq!(t.labels[10], 0);
        // anchors crossing the border are ignored
        assert_eq!(t.labels[0], -1);
    }

    #[test]
    fn sampling_respects_budget() {
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(16, 16, &cfg);
        let gts: Vec<BBox> = (0..6)
            .map(|i| BBox::from_xywh(40.0 * i as f64 + 4.0, 60.0, 34.0, 40.0).unwrap())
            .collect();
        let small = RpnTargetConfig {
            batch_size: 32,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = assign_rpn_targets(&anchors, &gts, 256.0, 256.0, &small, &mut rng).unwrap();
        assert!(t.sampled() <= 32);
        assert!(t.positives() <= 16);
    }
}
