//! Detection head: multi-scale ROI features, a two-layer fully-connected
//! trunk and sibling face/background and box-refinement outputs.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::boxes::{clip_box, decode_deltas, encode_deltas, iou, nms, BBox, Deltas};
use crate::error::{Error, Result};
use crate::fusion::{FeatureTapSet, Fusion, FusionGrads, RoiFuseCache};
use crate::layers::{fully_connected, fully_connected_backward, relu, relu_backward, softmax, Linear, LinearGrads};
use crate::tensor::Tensor;

/// A scored face box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub bbox: Linear,
    pub pool_size: usize,
}

#[derive(Debug, Clone)]
pub struct DetOutput {
    /// `R×2` (background, face) logits.
    pub logits: Tensor,
    /// `R×4` box deltas.
    pub deltas: Tensor,
}

impl DetOutput {
    pub fn len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct DetCache {
    pool: RoiFuseCache,
    flat: Tensor,
    h1_pre: Tensor,
    h1: Tensor,
    h2_pre: Tensor,
    h2: Tensor,
}

#[derive(Debug, Clone)]
pub struct DetGrads {
    /// One gradient per active fusion tap, shaped like the tap map.
    pub taps: Vec<Tensor>,
    pub fusion: FusionGrads,
    pub fc1: LinearGrads,
    pub fc2: LinearGrads,
    pub cls: LinearGrads,
    pub bbox: LinearGrads,
}

impl DetectionHead {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, pool_size: usize, hidden: usize, rng: &mut R) -> Self {
        let d = in_channels * pool_size * pool_size;
        DetectionHead {
            fc1: Linear::glorot(d, hidden, rng),
            fc2: Linear::glorot(hidden, hidden, rng),
            cls: Linear::glorot(hidden, 2, rng),
            bbox: Linear::glorot(hidden, 4, rng),
            pool_size,
        }
    }

    /// Runs the head on `rois`. `Ok(None)` for an empty ROI list.
    pub fn forward(
        &self,
        fusion: &Fusion,
        taps: &FeatureTapSet,
        rois: &[BBox],
    ) -> Result<Option<(DetOutput, DetCache)>> {
        if rois.is_empty() {
            return Ok(None);
        }
        let (pooled, pool) = fusion.ms_roi_pool(taps, rois, self.pool_size)?;
        let r = rois.len();
        let d = pooled.len() / r;
        let flat = pooled.reshape(&[r, d])?;
        let h1_pre = fully_connected(&flat, &self.fc1)?;
        let h1 = relu(&h1_pre);
        let h2_pre = fully_connected(&h1, &self.fc2)?;
        let h2 = relu(&h2_pre);
        let logits = fully_connected(&h2, &self.cls)?;
        let deltas = fully_connected(&h2, &self.bbox)?;
        Ok(Some((
            DetOutput { logits, deltas },
            DetCache {
                pool,
                flat,
                h1_pre,
                h1,
                h2_pre,
                h2,
            },
        )))
    }

    pub fn backward(
        &self,
        fusion: &Fusion,
        taps: &FeatureTapSet,
        cache: &DetCache,
        d_logits: &Tensor,
        d_deltas: &Tensor,
    ) -> Result<DetGrads> {
        let cls = fully_connected_backward(&cache.h2, &self.cls, d_logits)?;
        let bbox = fully_connected_backward(&cache.h2, &self.bbox, d_deltas)?;
        let d_h2 = relu_backward(&cache.h2_pre, &cls.input.add(&bbox.input)?);
        let fc2 = fully_connected_backward(&cache.h1, &self.fc2, &d_h2)?;
        let d_h1 = relu_backward(&cache.h1_pre, &fc2.input);
        let fc1 = fully_connected_backward(&cache.flat, &self.fc1, &d_h1)?;
        let r = cache.flat.shape()[0];
        let p = self.pool_size;
        let s = fusion.out_channels();
        let d_pooled = fc1.input.clone().reshape(&[r, s, p, p])?;
        let (tap_grads, fusion_grads) = fusion.ms_roi_pool_backward(taps, &cache.pool, &d_pooled)?;
        Ok(DetGrads {
            taps: tap_grads,
            fusion: fusion_grads,
            fc1,
            fc2,
            cls,
            bbox,
        })
    }

    /// Accumulates the head's own parameter gradients (not fusion or taps).
    pub fn accumulate(&mut self, g: &DetGrads) {
        self.fc1.accumulate(&g.fc1);
        self.fc2.accumulate(&g.fc2);
        self.cls.accumulate(&g.cls);
        self.bbox.accumulate(&g.bbox);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetTargetConfig {
    pub foreground_iou: f64,
    pub background_iou_low: f64,
    pub batch_size: usize,
    pub foreground_fraction: f64,
}

impl Default for DetTargetConfig {
    fn default() -> Self {
        DetTargetConfig {
            foreground_iou: 0.5,
            background_iou_low: 0.1,
            batch_size: 128,
            foreground_fraction: 0.25,
        }
    }
}

/// Sampled training ROIs with labels `1` (face) / `0` (background).
#[derive(Debug, Clone, PartialEq)]
pub struct DetTargets {
    pub rois: Vec<BBox>,
    pub labels: Vec<usize>,
    /// Meaningful only where `labels == 1`.
    pub deltas: Vec<Deltas>,
}

impl DetTargets {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Labels proposals (augmented with the ground-truth boxes themselves) by
/// their best IoU: face at `≥ foreground_iou`, background in
/// `[background_iou_low, foreground_iou)`, discarded otherwise. When no
/// background candidate exists the discarded pool fills in. Sampled ROIs
/// come back positives first, in sampling order.
pub fn assign_detection_targets<R: Rng + ?Sized>(
    proposals: &[BBox],
    gt_boxes: &[BBox],
    cfg: &DetTargetConfig,
    rng: &mut R,
) -> DetTargets {
    let candidates: Vec<BBox> = proposals.iter().chain(gt_boxes).copied().collect();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let mut discarded = Vec::new();
    let mut best_gt = vec![0usize; candidates.len()];
    for (i, c) in candidates.iter().enumerate() {
        let mut best = 0.0;
        for (g, gt) in gt_boxes.iter().enumerate() {
            let v = iou(c, gt);
            if v > best {
                best = v;
                best_gt[i] = g;
            }
        }
        if best >= cfg.foreground_iou {
            fg.push(i);
        } else if best >= cfg.background_iou_low {
            bg.push(i);
        } else {
            discarded.push(i);
        }
    }
    if bg.is_empty() {
        bg = discarded;
    }
    let max_fg = (cfg.batch_size as f64 * cfg.foreground_fraction).floor() as usize;
    fg.shuffle(rng);
    fg.truncate(max_fg);
    bg.shuffle(rng);
    bg.truncate(cfg.batch_size - fg.len());

    let mut rois = Vec::with_capacity(fg.len() + bg.len());
    let mut labels = Vec::with_capacity(rois.capacity());
    let mut deltas = Vec::with_capacity(rois.capacity());
    for &i in &fg {
        rois.push(candidates[i]);
        labels.push(1);
        deltas.push(encode_deltas(&gt_boxes[best_gt[i]], &candidates[i]));
    }
    for &i in &bg {
        rois.push(candidates[i]);
        labels.push(0);
        deltas.push(Deltas::default());
    }
    DetTargets { rois, labels, deltas }
}

/// Face probabilities, refined and clipped boxes, a strict score threshold
/// and NMS. Output is sorted by descending score.
pub fn postprocess_detections(
    logits: &Tensor,
    deltas: &Tensor,
    proposals: &[BBox],
    score_thresh: f64,
    nms_thresh: f64,
    img_w: f64,
    img_h: f64,
) -> Result<Vec<Detection>> {
    let (r, k) = logits.dims2()?;
    if k != 2 || deltas.shape() != [r, 4] || proposals.len() != r {
        return Err(Error::invalid(
            "postprocess_detections",
            format!(
                "logits {:?}, deltas {:?}, {} proposals",
                logits.shape(),
                deltas.shape(),
                proposals.len()
            ),
        ));
    }
    let probs = softmax(logits)?;
    let mut cands = Vec::new();
    for (i, roi) in proposals.iter().enumerate() {
        let score = probs.data()[2 * i + 1];
        if score <= score_thresh {
            continue;
        }
        let d = Deltas::from_slice(&deltas.data()[4 * i..4 * i + 4]);
        if let Some(b) = clip_box(&decode_deltas(&d, roi), img_w, img_h) {
            cands.push((b, score));
        }
    }
    Ok(nms(&cands, nms_thresh)
        .into_iter()
        .map(|i| Detection {
            bbox: cands[i].0,
            score: cands[i].1,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn gt_proposal_is_face_with_zero_deltas() {
        let gt = b(10.0, 10.0, 40.0, 40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = assign_detection_targets(&[gt], &[gt], &DetTargetConfig::default(), &mut rng);
        assert_eq!(t.labels, vec![1, 1]);
        assert!(t.deltas.iter().all(|d| *d == Deltas::default()));
    }

    #[test]
    fn iou_bands() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        // IoU 0.3: a 10×10 box shifted so the overlap is 10·x with 10x/(200−10x) = 0.3
        let x = 60.0 / 13.0;
        let mid = b(10.0 - x, 0.0, 20.0 - x, 10.0);
        assert!((iou(&mid, &gt) - 0.3).abs() < 1e-12);
        let far = b(9.5, 0.0, 19.5, 10.0);
        assert!(iou(&far, &gt) < 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = assign_detection_targets(&[mid, far], &[gt], &DetTargetConfig::default(), &mut rng);
        assert_eq!(t.rois.len(), 2);
        assert!(t.rois.contains(&mid) && !t.rois.contains(&far));
        let i = t.rois.iter().position(|r| *r == mid).unwrap();
        assert_eq!(t.labels[i], 0);
    }

    #[test]
    fn background_falls_back_to_discarded() {
        let far = b(50.0, 50.0, 60.0, 60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = assign_detection_targets(&[far], &[], &DetTargetConfig::default(), &mut rng);
        assert_eq!(t.labels, vec![0]);
    }

    #[test]
    fn sampling_budget() {
        let gt = b(0.0, 0.0, 40.0, 40.0);
        let props: Vec<BBox> = (0..300)
            .map(|i| {
                let s = (i % 30) as f64;
                b(s, s, 40.0 + s, 40.0 + s)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = assign_detection_targets(&props, &[gt], &DetTargetConfig::default(), &mut rng);
        assert!(t.rois.len() <= 128);
        assert!(t.positives() <= 32);
    }

    #[test]
    fn postprocess_thresholds_and_passes_boxes() {
        let props = [b(10.0, 10.0, 30.0, 30.0), b(50.0, 50.0, 70.0, 70.0)];
        let logits = Tensor::new(&[2, 2], vec![-4.0, 4.0, 4.0, -4.0]).unwrap();
        let deltas = Tensor::zeros(&[2, 4]);
        let dets = postprocess_detections(&logits, &deltas, &props, 0.8, 0.3, 100.0, 100.0).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, props[0]);
        let none = postprocess_detections(&logits, &deltas, &props, 0.9999, 0.3, 100.0, 100.0).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn identical_rois_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fusion = Fusion::new(
            &[(crate::fusion::TapName::Tap5, 3)],
            &crate::fusion::FusionConfig {
                shrink_channels: 2,
                ..Default::default()
            },
            &mut rng,
        );
        let taps = FeatureTapSet {
            taps: vec![
                crate::fusion::FeatureTap {
                    name: crate::fusion::TapName::Tap3,
                    map: Tensor::zeros(&[1, 1, 8, 8]),
                    stride: 4,
                },
                crate::fusion::FeatureTap {
                    name: crate::fusion::TapName::Tap4,
                    map: Tensor::zeros(&[1, 1, 4, 4]),
                    stride: 8,
                },
                crate::fusion::FeatureTap {
                    name: crate::fusion::TapName::Tap5,
                    map: Tensor::uniform(&[1, 3, 2, 2], 0.1, 1.0, &mut rng),
                    stride: 16,
                },
            ],
        };
        let head = DetectionHead::new(2, 3, 5, &mut rng);
        let roi = b(2.0, 3.0, 20.0, 25.0);
        let (out, _) = head.forward(&fusion, &taps, &[roi, roi]).unwrap().unwrap();
        assert_eq!(out.logits.shape(), &[2, 2]);
        assert_eq!(out.deltas.shape(), &[2, 4]);
        assert_eq!(out.logits.data()[..2], out.logits.data()[2..]);
        assert_eq!(out.deltas.data()[..4], out.deltas.data()[4..]);
        assert!(head.forward(&fusion, &taps, &[]).unwrap().is_none());
    }
}
