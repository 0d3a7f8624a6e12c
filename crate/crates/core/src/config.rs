//! Flat `key = value` run configuration with `#` comments.

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{InferenceConfig, ModelConfig};
use crate::train::TrainConfig;

/// Toy-data generation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub num_images: usize,
    pub face_min: usize,
    pub face_max: usize,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_images: 500,
            face_min: 16,
            face_max: 64,
            data_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub inference: InferenceConfig,
    pub data: DataConfig,
    pub paths: Paths,
}

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse {v:?}"))
}

fn list(key: &str, v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',').map(|s| num::<f64>(key, s.trim())).collect()
}

fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}`: expected true or false, found {v:?}")),
    }
}

pub const KEYS: &[&str] = &[
    "learning_rate",
    "momentum",
    "weight_decay",
    "iterations",
    "seed",
    "lambda",
    "image_size",
    "lr_drop",
    "log_every",
    "fusion_mode",
    "anchor_base_stride",
    "anchor_scales",
    "anchor_ratios",
    "shrink_channels",
    "roi_pool_size",
    "gamma_init",
    "l2_epsilon",
    "iou_threshold",
    "small_max_height",
    "large_min_height",
    "score_thresh",
    "nms_thresh",
    "num_images",
    "face_min",
    "face_max",
    "data_seed",
    "data_dir",
    "annotations",
    "checkpoint",
    "trace",
    "output_dir",
];

impl RunConfig {
    /// Applies one setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let path = || Some(PathBuf::from(v));
        match key {
            "learning_rate" => self.train.learning_rate = num(key, v)?,
            "momentum" => self.train.momentum = num(key, v)?,
            "weight_decay" => self.train.weight_decay = num(key, v)?,
            "iterations" => self.train.iterations = num(key, v)?,
            "seed" => self.train.seed = num(key, v)?,
            "lambda" => self.train.lambda = num(key, v)?,
            "image_size" => self.train.image_size = num(key, v)?,
            "lr_drop" => self.train.lr_drop = flag(key, v)?,
            "log_every" => self.train.log_every = num(key, v)?,
            "fusion_mode" => self.model.mode = v.parse().map_err(|e: Error| e.to_string())?,
            "anchor_base_stride" => self.model.anchors.base_stride = num(key, v)?,
            "anchor_scales" => self.model.anchors.scales = list(key, v)?,
            "anchor_ratios" => self.model.anchors.ratios = list(key, v)?,
            "shrink_channels" => self.model.fusion.shrink_channels = num(key, v)?,
            "roi_pool_size" => self.model.fusion.roi_pool_size = num(key, v)?,
            "gamma_init" => self.model.fusion.gamma_init = num(key, v)?,
            "l2_epsilon" => self.model.fusion.epsilon = num(key, v)?,
            "iou_threshold" => self.eval.iou_threshold = num(key, v)?,
            "small_max_height" => self.eval.small_max_height = num(key, v)?,
            "large_min_height" => self.eval.large_min_height = num(key, v)?,
            "score_thresh" => self.inference.score_thresh = num(key, v)?,
            "nms_thresh" => self.inference.nms_thresh = num(key, v)?,
            "num_images" => self.data.num_images = num(key, v)?,
            "face_min" => self.data.face_min = num(key, v)?,
            "face_max" => self.data.face_max = num(key, v)?,
            "data_seed" => self.data.data_seed = num(key, v)?,
            "data_dir" => self.paths.data_dir = path(),
            "annotations" => self.paths.annotations = path(),
            "checkpoint" => self.paths.checkpoint = path(),
            "trace" => self.paths.trace = path(),
            "output_dir" => self.paths.output_dir = path(),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults, then validates ranges.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, found {raw:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let a = &self.model.anchors;
        if a.base_stride != 16 {
            return bad(format!("anchor_base_stride {} must equal the tap5 stride 16", a.base_stride));
        }
        if a.scales.is_empty() || a.ratios.is_empty() || a.scales.iter().chain(&a.ratios).any(|&x| !(x > 0.0 && x.is_finite())) {
            return bad("anchor scales and ratios must be non-empty and positive".into());
        }
        let f = &self.model.fusion;
        if f.shrink_channels == 0 || f.roi_pool_size == 0 {
            return bad("shrink_channels and roi_pool_size must be positive".into());
        }
        if !(f.gamma_init.is_finite() && f.epsilon > 0.0) {
            return bad("gamma_init must be finite and l2_epsilon positive".into());
        }
        let inf = &self.inference;
        if !(0.0..1.0).contains(&inf.score_thresh) || !(inf.nms_thresh > 0.0 && inf.nms_thresh <= 1.0) {
            return bad("score_thresh must lie in [0, 1) and nms_thresh in (0, 1]".into());
        }
        let d = &self.data;
        if d.face_min < 4 || d.face_min > d.face_max || d.face_max > self.train.image_size / 2 {
            return bad(format!(
                "face range ({}, {}) must satisfy 4 <= face_min <= face_max <= image_size/2",
                d.face_min, d.face_max
            ));
        }
        Ok(())
    }
}
