//! Axis-aligned box arithmetic.
//!
//! Boxes use continuous corner coordinates `(x1, y1, x2, y2)` with
//! `width = x2 − x1` (no "+1" pixel convention), everywhere: anchors,
//! proposals, training targets, post-processing and evaluation.

use crate::error::{Error, Result};

/// Largest allowed log-scale delta before exponentiation, `ln(1000)`.
pub const MAX_LOG_SCALE: f64 = 6.907_755_278_982_137;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Rejects boxes without strictly positive, finite extent.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x2 > x1 && y2 > y1;
        if !ok {
            return Err(Error::invalid("bbox", format!("degenerate box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// From top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
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

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; symmetric, in `[0, 1]`, zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Box regression offsets relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Deltas {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl Deltas {
    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Deltas {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

/// Offsets that move `anchor` onto `target`.
pub fn encode_deltas(target: &BBox, anchor: &BBox) -> Deltas {
    let (cxt, cyt) = target.center();
    let (cxa, cya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    Deltas {
        tx: (cxt - cxa) / wa,
        ty: (cyt - cya) / ha,
        tw: (target.width() / wa).ln(),
        th: (target.height() / ha).ln(),
    }
}

/// Applies `deltas` to `anchor`. Log-scale terms are clamped to `ln(1000)`.
pub fn decode_deltas(deltas: &Deltas, anchor: &BBox) -> BBox {
    let (cxa, cya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    let cx = cxa + deltas.tx * wa;
    let cy = cya + deltas.ty * ha;
    let w = wa * deltas.tw.min(MAX_LOG_SCALE).exp();
    let h = ha * deltas.th.min(MAX_LOG_SCALE).exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Clamps to `[0, width] × [0, height]`; `None` when less than a pixel remains
/// on either side.
pub fn clip_box(b: &BBox, width: f64, height: f64) -> Option<BBox> {
    let x1 = b.x1.clamp(0.0, width);
    let y1 = b.y1.clamp(0.0, height);
    let x2 = b.x2.clamp(0.0, width);
    let y2 = b.y2.clamp(0.0, height);
    if x2 - x1 < 1.0 || y2 - y1 < 1.0 {
        return None;
    }
    Some(BBox { x1, y1, x2, y2 })
}

/// Indices sorted by descending score, ties by original index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. A box is suppressed iff its IoU with an
/// already-kept box exceeds `iou_threshold`. Returns kept indices in
/// selection order.
pub fn nms(boxes: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let scores: Vec<f64> = boxes.iter().map(|(_, s)| *s).collect();
    let order = score_order(&scores);
    let areas: Vec<f64> = boxes.iter().map(|(b, _)| b.area()).collect();
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let bi = &boxes[i].0;
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            let inter = bi.intersection(&boxes[j].0);
            if inter > 0.0 && inter / (areas[i] + areas[j] - inter) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Half-open cell rectangle `[x1, x2) × [y1, y2)` on a feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridRect {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl GridRect {
    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    /// Shifts and trims the rectangle into a `width × height` grid, keeping at
    /// least one cell per side.
    pub fn fit(&self, width: usize, height: usize) -> GridRect {
        let x1 = self.x1.min(width - 1);
        let y1 = self.y1.min(height - 1);
        GridRect {
            x1,
            y1,
            x2: self.x2.clamp(x1 + 1, width),
            y2: self.y2.clamp(y1 + 1, height),
        }
    }
}

/// Projects an image-space box onto a grid of the given stride: floor of the
/// leading edges, ceil of the trailing edges, at least one cell per side.
pub fn project_roi(b: &BBox, stride: usize) -> GridRect {
    let s = stride as f64;
    let x1 = (b.x1 / s).floor().max(0.0) as usize;
    let y1 = (b.y1 / s).floor().max(0.0) as usize;
    let x2 = ((b.x2 / s).ceil().max(0.0) as usize).max(x1 + 1);
    let y2 = ((b.y2 / s).ceil().max(0.0) as usize).max(y1 + 1);
    GridRect { x1, y1, x2, y2 }
}
