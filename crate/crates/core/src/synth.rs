//! Synthetic face-like scenes.
//!
//! A face is a bright ellipse with two dark eye dots and a dark mouth bar at
//! fixed proportional positions. Distractors are plain rectangles and discs
//! with no interior pattern. Shapes are rendered with 4×4 supersampling and
//! pixels are quantized to `k/255`, so a scene survives a PGM round trip
//! exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.05;
pub const PLACEMENT_ATTEMPTS: usize = 100;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    /// `1×1×S×S`, values `k/255`.
    pub image: Tensor,
    pub gt_boxes: Vec<BBox>,
    pub face_scale_range: (usize, usize),
    /// Faces requested but not placed within the attempt budget.
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Face { rect: Rect, skin: f64, feature: f64 },
    Block { rect: Rect, level: f64 },
    Disc { rect: Rect, level: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Rect {
    /// Overlap test with a one-pixel gap required between shapes.
    fn touches(&self, o: &Rect) -> bool {
        self.x < o.x + o.w + 1 && o.x < self.x + self.w + 1 && self.y < o.y + o.h + 1 && o.y < self.y + self.h + 1
    }
}

impl Shape {
    fn rect(&self) -> Rect {
        match *self {
            Shape::Face { rect, .. } | Shape::Block { rect, .. } | Shape::Disc { rect, .. } => rect,
        }
    }

    /// Intensity at `(u, v)` in unit box coordinates, or `None` outside.
    fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let in_ellipse = |cu: f64, cv: f64, ru: f64, rv: f64| {
            let a = (u - cu) / ru;
            let b = (v - cv) / rv;
            a * a + b * b <= 1.0
        };
        match *self {
            Shape::Face { rect, skin, feature } => {
                if !in_ellipse(0.5, 0.5, 0.5, 0.5) {
                    return None;
                }
                let aspect = rect.w as f64 / rect.h as f64;
                let eye_rv = 0.09;
                let eye_ru = eye_rv / aspect;
                let eye = in_ellipse(0.32, 0.38, eye_ru, eye_rv) || in_ellipse(0.68, 0.38, eye_ru, eye_rv);
                let mouth = (0.3..=0.7).contains(&u) && (0.66..=0.76).contains(&v);
                Some(if eye || mouth { feature } else { skin })
            }
            Shape::Block { level, .. } => Some(level),
            Shape::Disc { level, .. } => in_ellipse(0.5, 0.5, 0.5, 0.5).then_some(level),
        }
    }
}

fn paint(canvas: &mut [f64], size: usize, shape: &Shape) {
    let r = shape.rect();
    let n = SUPERSAMPLE as f64;
    for py in r.y..r.y + r.h {
        for px in r.x..r.x + r.w {
            let mut acc = 0.0;
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = ((px - r.x) as f64 + (sx as f64 + 0.5) / n) / r.w as f64;
                    let v = ((py - r.y) as f64 + (sy as f64 + 0.5) / n) / r.h as f64;
                    if let Some(val) = shape.sample(u, v) {
                        acc += val;
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let cover = hits as f64 / (n * n);
                let i = py * size + px;
                canvas[i] = canvas[i] * (1.0 - cover) + acc / (n * n);
            }
        }
    }
}

fn place<R: Rng>(rng: &mut R, size: usize, w: usize, h: usize, taken: &[Rect]) -> Option<Rect> {
    (0..PLACEMENT_ATTEMPTS).find_map(|_| {
        let rect = Rect {
            x: rng.random_range(0..=size - w),
            y: rng.random_range(0..=size - h),
            w,
            h,
        };
        (!taken.iter().any(|t| t.touches(&rect))).then_some(rect)
    })
}

fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0xA076_1D64_78BD_642F) ^ (index as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB).wrapping_add(0x8EBC_6AF0_9C88_C6E3)
}

/// Renders scene `index` of the dataset identified by `seed`.
pub fn generate_scene(index: usize, image_size: usize, scale_range: (usize, usize), seed: u64) -> Result<ToyScene> {
    validate(image_size, scale_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, index));
    let size = image_size;
    let background = rng.random_range(0.35..0.55);
    let mut canvas = vec![background; size * size];
    let mut taken: Vec<Rect> = Vec::new();
    let mut shapes = Vec::new();
    let mut gt_boxes = Vec::new();
    let mut dropped = 0;

    let n_faces = rng.random_range(1..=4);
    for _ in 0..n_faces {
        let h = rng.random_range(scale_range.0..=scale_range.1);
        let w = ((h as f64 * rng.random_range(0.75..0.9)).round() as usize).max(4);
        match place(&mut rng, size, w, h, &taken) {
            Some(rect) => {
                taken.push(rect);
                let skin = rng.random_range(0.75..0.95);
                let feature = rng.random_range(0.05..0.2);
                shapes.push(Shape::Face { rect, skin, feature });
                gt_boxes.push(BBox::from_xywh(rect.x as f64, rect.y as f64, w as f64, h as f64)?);
            }
            None => dropped += 1,
        }
    }
    let n_distractors = rng.random_range(0..=3);
    for _ in 0..n_distractors {
        let h = rng.random_range(scale_range.0..=scale_range.1);
        let w = rng.random_range(scale_range.0..=scale_range.1);
        let level = if rng.random_bool(0.5) {
            rng.random_range(0.75..0.95)
        } else {
            rng.random_range(0.05..0.25)
        };
        let disc = rng.random_bool(0.5);
        if let Some(rect) = place(&mut rng, size, w, h, &taken) {
            taken.push(rect);
            shapes.push(if disc {
                Shape::Disc { rect, level }
            } else {
                Shape::Block { rect, level }
            });
        }
    }
    for s in &shapes {
        paint(&mut canvas, size, s);
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for px in canvas.iter_mut() {
        let v = (*px + noise.sample(&mut rng)).clamp(0.0, 1.0);
        *px = (v * 255.0).round() / 255.0;
    }
    Ok(ToyScene {
        image: Tensor::new(&[1, 1, size, size], canvas)?,
        gt_boxes,
        face_scale_range: scale_range,
        dropped,
    })
}

fn validate(image_size: usize, (lo, hi): (usize, usize)) -> Result<()> {
    if image_size == 0 || !image_size.is_multiple_of(16) {
        return Err(Error::Config(format!("image_size {image_size} is not a positive multiple of 16")));
    }
    if lo < 4 || lo > hi || hi > image_size / 2 {
        return Err(Error::Config(format!(
            "face scale range ({lo}, {hi}) must satisfy 4 <= min <= max <= {}",
            image_size / 2
        )));
    }
    Ok(())
}

/// `n_images` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate_toy_dataset(
    n_images: usize,
    image_size: usize,
    face_scale_range: (usize, usize),
    seed: u64,
) -> Result<Vec<ToyScene>> {
    validate(image_size, face_scale_range)?;
    (0..n_images)
        .map(|i| generate_scene(i, image_size, face_scale_range, seed))
        .collect()
}

impl ToyScene {
    pub fn to_sample(&self) -> crate::train::Sample {
        let (_, _, h, w) = self.image.dims4().expect("scene image is 4-d");
        crate::train::Sample {
            image: self.image.clone(),
            gt_boxes: self.gt_boxes.clone(),
            extent: (w as f64, h as f64),
        }
    }
}
