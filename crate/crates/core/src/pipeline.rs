//! Dataset-level glue: loading annotated images, batch detection and the
//! multi-scale versus tap5-only ablation.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, EvalConfig, EvalReport, ImageAnnotation, ImageDetections};
use crate::io::{load_image, parse_annotations, LoadedImage};
use crate::model::{FusionMode, InferenceConfig, ModelConfig, Network};
use crate::synth::ToyScene;
use crate::train::{train, Sample, TraceEntry, TrainConfig};

/// An annotated image held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub annotation: ImageAnnotation,
    pub image: LoadedImage,
}

impl LabeledImage {
    pub fn to_sample(&self) -> Sample {
        Sample {
            image: self.image.tensor.clone(),
            gt_boxes: self.annotation.boxes.clone(),
            extent: self.image.extent(),
        }
    }
}

impl From<(String, &ToyScene)> for LabeledImage {
    fn from((name, scene): (String, &ToyScene)) -> Self {
        let (_, _, h, w) = scene.image.dims4().expect("scene image is 4-d");
        LabeledImage {
            annotation: ImageAnnotation {
                image: name,
                boxes: scene.gt_boxes.clone(),
            },
            image: LoadedImage {
                tensor: scene.image.clone(),
                width: w,
                height: h,
            },
        }
    }
}

/// Image paths in an annotation file resolve against the file's directory.
pub fn image_root(annotations: &Path) -> PathBuf {
    annotations.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_labeled_images(annotations: &Path) -> Result<Vec<LabeledImage>> {
    let root = image_root(annotations);
    parse_annotations(annotations)?
        .records
        .into_iter()
        .map(|annotation| {
            let image = load_image(&root.join(&annotation.image))?;
            Ok(LabeledImage { annotation, image })
        })
        .collect()
}

/// Runs the detector over every image, in order.
pub fn detect_all(net: &Network, images: &[LabeledImage], cfg: &InferenceConfig) -> Result<Vec<ImageDetections>> {
    images
        .iter()
        .map(|li| {
            Ok(ImageDetections {
                image: li.annotation.image.clone(),
                detections: net.detect(&li.image.tensor, li.image.extent(), cfg)?,
            })
        })
        .collect()
}

/// Score threshold used when detections feed evaluation: low enough that
/// the precision/recall sweep sees the full ranking.
pub const EVAL_MIN_SCORE: f64 = 0.01;

/// Evaluates a trained network on labeled images.
pub fn evaluate_network(
    net: &Network,
    images: &[LabeledImage],
    inference: &InferenceConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let cfg = InferenceConfig {
        score_thresh: EVAL_MIN_SCORE,
        ..*inference
    };
    let dets = detect_all(net, images, &cfg)?;
    let ann: Vec<ImageAnnotation> = images.iter().map(|li| li.annotation.clone()).collect();
    evaluate_dataset(&dets, &ann, eval)
}

/// Builds and trains a network under `model` and `train_cfg`.
pub fn train_network(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &[Sample],
    on_log: impl FnMut(&TraceEntry),
) -> Result<(Network, Vec<TraceEntry>)> {
    let mut net = Network::new(model.clone(), train_cfg.seed);
    let trace = train(&mut net, data, train_cfg, on_log)?;
    Ok((net, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub multiscale: EvalReport,
    pub tap5: EvalReport,
}

impl AblationResult {
    /// Overall AP difference, multi-scale minus tap5-only.
    pub fn margin(&self) -> Option<f64> {
        Some(self.multiscale.overall().ap()? - self.tap5.overall().ap()?)
    }
}

/// Trains the multi-scale and tap5-only models on the same data with the
/// same seed and evaluates both on `test`.
pub fn run_ablation(cfg: &RunConfig, train_set: &[LabeledImage], test: &[LabeledImage]) -> Result<AblationResult> {
    if train_set.is_empty() || test.is_empty() {
        return Err(Error::Config("ablation needs non-empty training and test sets".into()));
    }
    let data: Vec<Sample> = train_set.iter().map(LabeledImage::to_sample).collect();
    let mut reports = Vec::new();
    for mode in [FusionMode::MultiScale, FusionMode::Tap5Only] {
        let model = ModelConfig {
            mode,
            ..cfg.model.clone()
        };
        let (net, _) = train_network(&model, &cfg.train, &data, |_| {})?;
        reports.push(evaluate_network(&net, test, &cfg.inference, &cfg.eval)?);
    }
    let tap5 = reports.pop().expect("two reports");
    let multiscale = reports.pop().expect("two reports");
    Ok(AblationResult { multiscale, tap5 })
}
