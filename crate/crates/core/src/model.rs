//! The full detector: backbone, shared fusion, proposal head and detection
//! head, with named parameters for checkpointing and optimization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::checkpoint::Checkpoint;
use crate::detection::{postprocess_detections, Detection, DetectionHead};
use crate::error::{Error, Result};
use crate::fusion::{FeatureTap, FeatureTapSet, Fusion, FusionConfig, TapName};
use crate::layers::{conv2d, conv2d_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, Conv2d, ConvGrads};
use crate::rpn::{generate_anchors, propose, AnchorConfig, ProposalConfig, RpnHead};
use crate::tensor::Tensor;

/// Which taps feed the fusion layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// tap3, tap4 and tap5.
    MultiScale,
    /// tap5 alone (the single-scale baseline).
    Tap5Only,
}

impl FusionMode {
    pub fn taps(&self) -> &'static [TapName] {
        match self {
            FusionMode::MultiScale => &TapName::ALL,
            FusionMode::Tap5Only => &[TapName::Tap5],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::MultiScale => "multiscale",
            FusionMode::Tap5Only => "tap5",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiscale" => Ok(FusionMode::MultiScale),
            "tap5" => Ok(FusionMode::Tap5Only),
            other => Err(Error::Config(format!("unknown fusion mode `{other}` (multiscale|tap5)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: FusionMode,
    pub in_channels: usize,
    /// Channels of the five backbone stages.
    pub stage_channels: [usize; 5],
    pub anchors: AnchorConfig,
    pub fusion: FusionConfig,
    pub rpn_hidden: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: FusionMode::MultiScale,
            in_channels: 1,
            stage_channels: [8, 16, 32, 64, 64],
            anchors: AnchorConfig::default(),
            fusion: FusionConfig::default(),
            rpn_hidden: 256,
            head_hidden: 256,
        }
    }
}

/// Five stages of two 3×3 convolutions with ReLU; 2×2 max-pooling after the
/// first four. Stages 3, 4 and 5 are tapped at strides 4, 8 and 16.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stages: Vec<[Conv2d; 2]>,
}

/// Cumulative stride of each tapped stage.
pub const TAP_STRIDES: [usize; 3] = [4, 8, 16];

#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Per stage, per conv: input and pre-activation.
    convs: Vec<[(Tensor, Tensor); 2]>,
    /// Per pooled stage: input shape and argmax.
    pools: Vec<(Vec<usize>, Vec<usize>)>,
}

impl Backbone {
    pub fn new(in_channels: usize, channels: [usize; 5], rng: &mut ChaCha8Rng) -> Self {
        let mut prev = in_channels;
        let stages = channels
            .iter()
            .map(|&c| {
                let a = Conv2d::glorot(prev, c, 3, rng);
                let b = Conv2d::glorot(c, c, 3, rng);
                prev = c;
                [a, b]
            })
            .collect();
        Backbone { stages }
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        [2, 3, 4].map(|s| self.stages[s][1].out_channels())
    }

    pub fn forward(&self, image: &Tensor) -> Result<(FeatureTapSet, BackboneCache)> {
        let (_, _, h, w) = image.dims4()?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::invalid(
                "backbone",
                format!("image extent {h}×{w} is not a multiple of 16"),
            ));
        }
        let mut x = image.clone();
        let mut convs = Vec::with_capacity(5);
        let mut pools = Vec::with_capacity(4);
        let mut taps = Vec::with_capacity(3);
        for (s, stage) in self.stages.iter().enumerate() {
            let mut cached: Vec<(Tensor, Tensor)> = Vec::with_capacity(2);
            for conv in stage {
                let pre = conv2d(&x, conv)?;
                let out = relu(&pre);
                cached.push((std::mem::replace(&mut x, out), pre));
            }
            let [a, b]: [(Tensor, Tensor); 2] = cached.try_into().expect("two convs per stage");
            convs.push([a, b]);
            if s >= 2 {
                taps.push(FeatureTap {
                    name: TapName::ALL[s - 2],
                    map: x.clone(),
                    stride: TAP_STRIDES[s - 2],
                });
            }
            if s < 4 {
                let (pooled, argmax) = maxpool2d(&x, 2, 2)?;
                pools.push((x.shape().to_vec(), argmax));
                x = pooled;
            }
        }
        Ok((FeatureTapSet { taps }, BackboneCache { convs, pools }))
    }

    /// Back-propagates tap gradients (tap3, tap4, tap5 order; `None` for an
    /// unused tap) and returns per-conv parameter gradients in stage order.
    pub fn backward(&self, cache: &BackboneCache, tap_grads: [Option<&Tensor>; 3]) -> Result<Vec<[ConvGrads; 2]>> {
        let mut grads: Vec<Option<[ConvGrads; 2]>> = vec![None, None, None, None, None];
        let mut upstream: Option<Tensor> = None;
        for s in (0..5).rev() {
            // gradient w.r.t. this stage's output
            let mut g = upstream.take();
            if s >= 2 {
                if let Some(t) = tap_grads[s - 2] {
                    g = Some(match g {
                        Some(acc) => acc.add(t)?,
                        None => t.clone(),
                    });
                }
            }
            let out_shape = cache.convs[s][1].1.shape().to_vec();
            let mut g = g.unwrap_or_else(|| Tensor::zeros(&out_shape));
            let mut stage_grads = Vec::with_capacity(2);
            for j in (0..2).rev() {
                let (input, pre) = &cache.convs[s][j];
                let d_pre = relu_backward(pre, &g);
                let need_input = s > 0 || j > 0;
                let cg = conv2d_backward(input, &self.stages[s][j], &d_pre, need_input)?;
                if let Some(dx) = &cg.input {
                    g = dx.clone();
                }
                stage_grads.push(cg);
            }
            stage_grads.reverse();
            grads[s] = Some(stage_grads.try_into().expect("two convs per stage"));
            if s > 0 {
                let (shape, argmax) = &cache.pools[s - 1];
                upstream = Some(maxpool2d_backward(shape, argmax, &g));
            }
        }
        Ok(grads.into_iter().map(|g| g.unwrap()).collect())
    }

    pub fn accumulate(&mut self, grads: &[[ConvGrads; 2]]) {
        for (stage, g) in self.stages.iter_mut().zip(grads) {
            stage[0].accumulate(&g[0]);
            stage[1].accumulate(&g[1]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub fusion: Fusion,
    pub rpn: RpnHead,
    pub det: DetectionHead,
}

impl Network {
    /// Freshly initialized network; all randomness comes from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.in_channels, config.stage_channels, &mut rng);
        let tap_channels = backbone.tap_channels();
        let active: Vec<(TapName, usize)> = config
            .mode
            .taps()
            .iter()
            .map(|&t| (t, tap_channels[TapName::ALL.iter().position(|&n| n == t).unwrap()]))
            .collect();
        let fusion = Fusion::new(&active, &config.fusion, &mut rng);
        let rpn = RpnHead::new(fusion.out_channels(), config.rpn_hidden, config.anchors.per_cell(), &mut rng);
        let det = DetectionHead::new(
            fusion.out_channels(),
            config.fusion.roi_pool_size,
            config.head_hidden,
            &mut rng,
        );
        Network {
            config,
            backbone,
            fusion,
            rpn,
            det,
        }
    }

    /// Parameters by name, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (s, stage) in self.backbone.stages.iter().enumerate() {
            for (j, conv) in stage.iter().enumerate() {
                out.push((format!("backbone.conv{}_{}.weight", s + 1, j + 1), &conv.weight));
                out.push((format!("backbone.conv{}_{}.bias", s + 1, j + 1), &conv.bias));
            }
        }
        for (name, layer) in self.fusion.taps.iter().zip(&self.fusion.norms) {
            out.push((format!("norm.{name}.gamma"), &layer.gamma));
        }
        out.push(("fuse.shrink.weight".into(), &self.fusion.shrink.weight));
        out.push(("fuse.shrink.bias".into(), &self.fusion.shrink.bias));
        for (name, conv) in [("conv", &self.rpn.conv), ("cls", &self.rpn.cls), ("bbox", &self.rpn.bbox)] {
            out.push((format!("rpn.{name}.weight"), &conv.weight));
            out.push((format!("rpn.{name}.bias"), &conv.bias));
        }
        for (name, fc) in [
            ("fc1", &self.det.fc1),
            ("fc2", &self.det.fc2),
            ("cls", &self.det.cls),
            ("bbox", &self.det.bbox),
        ] {
            out.push((format!("det.{name}.weight"), &fc.weight));
            out.push((format!("det.{name}.bias"), &fc.bias));
        }
        out
    }

    /// Mutable parameters, same names and order as [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = self.params().into_iter().map(|(n, _)| n).collect();
        let mut refs: Vec<&mut Tensor> = Vec::new();
        for stage in self.backbone.stages.iter_mut() {
            for conv in stage.iter_mut() {
                refs.push(&mut conv.weight);
                refs.push(&mut conv.bias);
            }
        }
        for layer in self.fusion.norms.iter_mut() {
            refs.push(&mut layer.gamma);
        }
        refs.push(&mut self.fusion.shrink.weight);
        refs.push(&mut self.fusion.shrink.bias);
        for conv in [&mut self.rpn.conv, &mut self.rpn.cls, &mut self.rpn.bbox] {
            refs.push(&mut conv.weight);
            refs.push(&mut conv.bias);
        }
        for fc in [&mut self.det.fc1, &mut self.det.fc2, &mut self.det.cls, &mut self.det.bbox] {
            refs.push(&mut fc.weight);
            refs.push(&mut fc.bias);
        }
        names.into_iter().zip(refs).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    /// All parameter values concatenated in [`Network::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    /// All gradients concatenated (zeros where no gradient was accumulated).
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|(_, t)| t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) {
        let mut off = 0;
        for (_, t) in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            entries: self
                .params()
                .into_iter()
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.take_grad();
                    (n, t)
                })
                .collect(),
        }
    }

    /// Builds a network for `config` and loads every parameter from `ck`.
    /// Missing, extra or mis-shaped parameters are rejected.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut net = Network::new(config, 0);
        let expected = net.params().len();
        if ck.entries.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameters, found {}",
                ck.entries.len()
            )));
        }
        for (name, t) in net.params_mut() {
            let src = ck
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(net)
    }

    /// Anchors for an image of the given padded extent.
    pub fn anchors(&self, img_h: usize, img_w: usize) -> Vec<BBox> {
        let s = self.config.anchors.base_stride;
        generate_anchors(img_h / s, img_w / s, &self.config.anchors)
    }

    /// End-to-end inference on one `1×C×H×W` image. `extent` is the original
    /// (unpadded) `(width, height)` used for clipping.
    pub fn detect(&self, image: &Tensor, extent: (f64, f64), cfg: &InferenceConfig) -> Result<Vec<Detection>> {
        let (_, _, h, w) = image.dims4()?;
        let (taps, _) = self.backbone.forward(image)?;
        let (fused, _) = self.fusion.rpn_features(&taps)?;
        let (out, _) = self.rpn.forward(&fused)?;
        let anchors = self.anchors(h, w);
        let proposals = propose(&out.logits, &out.deltas, &anchors, extent.0, extent.1, &cfg.proposals)?;
        let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let Some((det, _)) = self.det.forward(&self.fusion, &taps, &rois)? else {
            return Ok(Vec::new());
        };
        postprocess_detections(
            &det.logits,
            &det.deltas,
            &rois,
            cfg.score_thresh,
            cfg.nms_thresh,
            extent.0,
            extent.1,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub proposals: ProposalConfig,
    pub score_thresh: f64,
    pub nms_thresh: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            proposals: ProposalConfig::default(),
            score_thresh: 0.8,
            nms_thresh: 0.3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_shapes_and_strides() {
        let net = Network::new(ModelConfig::default(), 1);
        let img = Tensor::zeros(&[1, 1, 64, 96]);
        let (taps, _) = net.backbone.forward(&img).unwrap();
        let shapes: Vec<Vec<usize>> = taps.taps.iter().map(|t| t.map.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 32, 16, 24], vec![1, 64, 8, 12], vec![1, 64, 4, 6]]);
        assert_eq!(taps.taps.iter().map(|t| t.stride).collect::<Vec<_>>(), vec![4, 8, 16]);
        assert!(net.backbone.forward(&Tensor::zeros(&[1, 1, 40, 48])).is_err());
    }

    #[test]
    fn shrink_matches_tap5_channels() {
        for mode in [FusionMode::MultiScale, FusionMode::Tap5Only] {
            let net = Network::new(
                ModelConfig {
                    mode,
                    ..Default::default()
                },
                0,
            );
            assert_eq!(net.fusion.out_channels(), 64);
        }
        let ms = Network::new(ModelConfig::default(), 0);
        assert_eq!(ms.fusion.shrink.in_channels(), 32 + 64 + 64);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Network::new(ModelConfig::default(), 3);
        let ck = net.to_checkpoint();
        let back = Network::from_checkpoint(ModelConfig::default(), &Checkpoint::from_bytes(&ck.to_bytes()).unwrap())
            .unwrap();
        assert_eq!(back.flat_params(), net.flat_params());
        assert!(ck.get("norm.tap3.gamma").is_some());
        assert!(ck.get("rpn.cls.weight").is_some());
        let tap5 = ModelConfig {
            mode: FusionMode::Tap5Only,
            ..Default::default()
        };
        assert!(Network::from_checkpoint(tap5, &ck).is_err());
    }

    #[test]
    fn params_and_params_mut_agree() {
        let mut net = Network::new(ModelConfig::default(), 0);
        let a: Vec<(String, Vec<usize>)> = net.params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let b: Vec<(String, Vec<usize>)> = net.params_mut().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        assert_eq!(a, b);
    }
}
