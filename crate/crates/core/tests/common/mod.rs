//! Reference implementations shared by the integration tests. Each one is
//! written for obviousness, not speed, and shares no code with the library.
#![allow(dead_code)]

use std::io::Write;

use msfrcnn::boxes::iou;
use msfrcnn::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64, max_side: f64) -> BBox {
    let w = rng.random_range(1.0..max_side);
    let h = rng.random_range(1.0..max_side);
    let x = rng.random_range(0.0..extent);
    let y = rng.random_range(0.0..extent);
    bx(x, y, x + w, y + h)
}

/// Box on a small integer grid, so overlaps and IoU ties are common.
pub fn grid_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0..8) as f64;
    let y = rng.random_range(0..8) as f64;
    bx(x, y, x + rng.random_range(2..8) as f64, y + rng.random_range(2..8) as f64)
}

/// Repeatedly take the best remaining box and drop everything overlapping
/// it, recomputing IoU from scratch each round.
pub fn oracle_nms(boxes: &[(BBox, f64)], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if boxes[i].1 > boxes[best].1 || (boxes[i].1 == boxes[best].1 && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&j| j != best && iou(&boxes[best].0, &boxes[j].0) <= thr);
    }
    keep
}

/// Greedy matching as a search: at every step collect each (gt, iou)
/// candidate above threshold, then pick the winner by the tie rule.
pub fn oracle_match(dets: &[BBox], gts: &[BBox], thr: f64) -> Vec<Option<usize>> {
    let mut free: Vec<usize> = (0..gts.len()).collect();
    let mut out = Vec::new();
    for d in dets {
        let candidates: Vec<(usize, f64)> = free
            .iter()
            .map(|&g| (g, iou(d, &gts[g])))
            .filter(|&(_, v)| v > thr)
            .collect();
        let top = candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let winner = candidates.iter().filter(|c| c.1 == top).map(|c| c.0).min();
        if let Some(g) = winner {
            free.retain(|&f| f != g);
        }
        out.push(winner);
    }
    out
}

/// AP from the definition: for each prefix, the best precision over all
/// longer-or-equal prefixes, weighted by the recall step.
pub fn oracle_ap(flags: &[bool], n_gt: usize) -> f64 {
    let prefix = |k: usize| {
        let tp = flags[..k].iter().filter(|&&f| f).count() as f64;
        (tp / n_gt as f64, tp / k as f64)
    };
    let mut ap = 0.0;
    for i in 1..=flags.len() {
        let (r, _) = prefix(i);
        let r_prev = if i == 1 { 0.0 } else { prefix(i - 1).0 };
        let best = (i..=flags.len()).map(|k| prefix(k).1).fold(0.0, f64::max);
        ap += (r - r_prev) * best;
    }
    ap
}

/// Writes straight to the stderr handle, which the test harness does not
/// capture.
pub fn report(line: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
    let _ = e.flush();
}
