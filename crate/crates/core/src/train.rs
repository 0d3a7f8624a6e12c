//! Joint end-to-end training under the four-term multi-task loss.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::detection::{assign_detection_targets, DetCache, DetOutput, DetTargetConfig, DetTargets};
use crate::error::{Error, Result};
use crate::fusion::{FeatureTapSet, RpnFuseCache, TapName};
use crate::layers::{smooth_l1, smooth_l1_backward, softmax_cross_entropy, softmax_cross_entropy_backward};
use crate::model::{BackboneCache, Network};
use crate::rpn::{
    assign_rpn_targets, delta_offset, logit_offset, propose, ProposalConfig, RpnCache, RpnOutput, RpnTargetConfig,
    RpnTargets,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Weight of both regression terms.
    pub lambda: f64,
    pub image_size: usize,
    /// Divide the learning rate by 10 for the last quarter of the run.
    pub lr_drop: bool,
    pub log_every: usize,
    pub proposals: ProposalConfig,
    pub rpn_targets: RpnTargetConfig,
    pub det_targets: DetTargetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            iterations: 4000,
            seed: 7,
            lambda: 1.0,
            image_size: 128,
            lr_drop: false,
            log_every: 10,
            proposals: ProposalConfig::default(),
            rpn_targets: RpnTargetConfig::default(),
            det_targets: DetTargetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return bad("image_size must be a positive multiple of 16");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }
}

/// One training image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1×C×H×W`, extents multiples of 16.
    pub image: Tensor,
    pub gt_boxes: Vec<BBox>,
    /// Original `(width, height)` before padding.
    pub extent: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub total: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub det_cls: f64,
    pub det_reg: f64,
}

/// Which halves of the loss contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossParts {
    pub rpn: bool,
    pub det: bool,
}

impl LossParts {
    pub const ALL: LossParts = LossParts { rpn: true, det: true };
}

/// Gradients of the total loss with respect to the raw head outputs.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub rpn_logits: Tensor,
    pub rpn_deltas: Tensor,
    pub det_logits: Option<Tensor>,
    pub det_deltas: Option<Tensor>,
}

/// `rpn_cls + λ·rpn_reg + det_cls + λ·det_reg`. Classification terms average
/// cross-entropy over sampled (non-ignored) items; regression terms sum
/// smooth-L1 over positives and divide by the positive count. A term with no
/// samples is zero.
pub fn multitask_loss(
    rpn: &RpnOutput,
    rpn_targets: &RpnTargets,
    det: Option<&DetOutput>,
    det_targets: &DetTargets,
    lambda: f64,
    parts: LossParts,
) -> Result<(LossComponents, HeadGrads)> {
    let (_, c, h, w) = rpn.logits.dims4()?;
    let k = c / 2;
    let hw = h * w;
    if rpn_targets.labels.len() != k * hw {
        return Err(Error::invalid(
            "multitask_loss",
            format!("{} anchor labels for a {k}×{h}×{w} head", rpn_targets.labels.len()),
        ));
    }
    let mut comps = LossComponents::default();
    let mut d_rpn_logits = Tensor::zeros(rpn.logits.shape());
    let mut d_rpn_deltas = Tensor::zeros(rpn.deltas.shape());

    if parts.rpn {
        let sampled: Vec<usize> = (0..rpn_targets.labels.len())
            .filter(|&i| rpn_targets.labels[i] >= 0)
            .collect();
        if !sampled.is_empty() {
            let logits = Tensor::from_fn(&[sampled.len(), 2], |t| {
                rpn.logits.data()[logit_offset(sampled[t / 2], t % 2, k, hw)]
            });
            let labels: Vec<usize> = sampled.iter().map(|&i| rpn_targets.labels[i] as usize).collect();
            let (loss, probs) = softmax_cross_entropy(&logits, &labels)?;
            comps.rpn_cls = loss;
            let g = softmax_cross_entropy_backward(&probs, &labels);
            for (t, v) in g.data().iter().enumerate() {
                d_rpn_logits.data_mut()[logit_offset(sampled[t / 2], t % 2, k, hw)] += v;
            }
        }
        let positives: Vec<usize> = (0..rpn_targets.labels.len())
            .filter(|&i| rpn_targets.labels[i] == 1)
            .collect();
        if !positives.is_empty() && lambda != 0.0 {
            let n = positives.len() as f64;
            let pred = Tensor::from_fn(&[positives.len(), 4], |t| {
                rpn.deltas.data()[delta_offset(positives[t / 4], t % 4, k, hw)]
            });
            let target = Tensor::from_fn(&[positives.len(), 4], |t| {
                rpn_targets.deltas[positives[t / 4]].to_array()[t % 4]
            });
            let mask = Tensor::full(&[positives.len(), 4], 1.0);
            comps.rpn_reg = smooth_l1(&pred, &target, &mask)? / n;
            let g = smooth_l1_backward(&pred, &target, &mask)?;
            for (t, v) in g.data().iter().enumerate() {
                d_rpn_deltas.data_mut()[delta_offset(positives[t / 4], t % 4, k, hw)] += lambda * v / n;
            }
        }
    }

    let mut det_grads = (None, None);
    if let Some(det) = det.filter(|_| parts.det) {
        let r = det.len();
        if r != det_targets.labels.len() {
            return Err(Error::invalid(
                "multitask_loss",
                format!("{r} detection outputs for {} targets", det_targets.labels.len()),
            ));
        }
        let (loss, probs) = softmax_cross_entropy(&det.logits, &det_targets.labels)?;
        comps.det_cls = loss;
        let d_logits = softmax_cross_entropy_backward(&probs, &det_targets.labels);
        let mut d_deltas = Tensor::zeros(&[r, 4]);
        let n_pos = det_targets.positives();
        if n_pos > 0 && lambda != 0.0 {
            let target = Tensor::from_fn(&[r, 4], |t| det_targets.deltas[t / 4].to_array()[t % 4]);
            let mask = Tensor::from_fn(&[r, 4], |t| (det_targets.labels[t / 4] == 1) as u8 as f64);
            comps.det_reg = smooth_l1(&det.deltas, &target, &mask)? / n_pos as f64;
            let g = smooth_l1_backward(&det.deltas, &target, &mask)?;
            d_deltas = g.scale(lambda / n_pos as f64);
        }
        det_grads = (Some(d_logits), Some(d_deltas));
    }

    comps.total = comps.rpn_cls + lambda * comps.rpn_reg + comps.det_cls + lambda * comps.det_reg;
    Ok((
        comps,
        HeadGrads {
            rpn_logits: d_rpn_logits,
            rpn_deltas: d_rpn_deltas,
            det_logits: det_grads.0,
            det_deltas: det_grads.1,
        },
    ))
}

/// Targets for one iteration, fixed before the loss is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTargets {
    pub rpn: RpnTargets,
    pub det: DetTargets,
}

/// Forward state shared by target assignment, loss and backward.
pub struct Trunk {
    taps: FeatureTapSet,
    backbone: BackboneCache,
    fuse: RpnFuseCache,
    rpn: RpnOutput,
    rpn_cache: RpnCache,
}

pub fn forward_trunk(net: &Network, image: &Tensor) -> Result<Trunk> {
    let (taps, backbone) = net.backbone.forward(image)?;
    let (fused, fuse) = net.fusion.rpn_features(&taps)?;
    let (rpn, rpn_cache) = net.rpn.forward(&fused)?;
    Ok(Trunk {
        taps,
        backbone,
        fuse,
        rpn,
        rpn_cache,
    })
}

/// Proposals from the current network state, then anchor and ROI targets.
pub fn assign_targets(
    net: &Network,
    trunk: &Trunk,
    sample: &Sample,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepTargets> {
    let (_, _, h, w) = sample.image.dims4()?;
    let anchors = net.anchors(h, w);
    let (ew, eh) = sample.extent;
    let proposals = propose(&trunk.rpn.logits, &trunk.rpn.deltas, &anchors, ew, eh, &cfg.proposals)?;
    let rpn = assign_rpn_targets(&anchors, &sample.gt_boxes, ew, eh, &cfg.rpn_targets, rng)?;
    let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let det = assign_detection_targets(&boxes, &sample.gt_boxes, &cfg.det_targets, rng);
    Ok(StepTargets { rpn, det })
}

/// Evaluates the loss on fixed targets; when `backward` is set, accumulates
/// parameter gradients into `net`. Tap gradients from both heads are summed
/// before a single backbone backward pass.
pub fn loss_and_backward(
    net: &mut Network,
    trunk: Trunk,
    targets: &StepTargets,
    lambda: f64,
    parts: LossParts,
    backward: bool,
) -> Result<LossComponents> {
    let det: Option<(DetOutput, DetCache)> = if parts.det {
        net.det.forward(&net.fusion, &trunk.taps, &targets.det.rois)?
    } else {
        None
    };
    let (comps, grads) = multitask_loss(
        &trunk.rpn,
        &targets.rpn,
        det.as_ref().map(|d| &d.0),
        &targets.det,
        lambda,
        parts,
    )?;
    if !backward {
        return Ok(comps);
    }

    let mut tap_grads: [Option<Tensor>; 3] = [None, None, None];
    let mut add_tap = |name: TapName, g: Tensor| -> Result<()> {
        let slot = &mut tap_grads[TapName::ALL.iter().position(|&n| n == name).unwrap()];
        *slot = Some(match slot.take() {
            Some(acc) => acc.add(&g)?,
            None => g,
        });
        Ok(())
    };

    if parts.rpn {
        let rg = net.rpn.backward(&trunk.rpn_cache, &grads.rpn_logits, &grads.rpn_deltas)?;
        let (tg, fg) = net.fusion.rpn_features_backward(&trunk.fuse, &rg.input)?;
        for (&name, g) in net.fusion.taps.clone().iter().zip(tg) {
            add_tap(name, g)?;
        }
        net.rpn.accumulate(&rg);
        net.fusion.accumulate(&fg);
    }
    if let (Some((_, cache)), Some(dl), Some(dd)) = (det.as_ref(), grads.det_logits.as_ref(), grads.det_deltas.as_ref()) {
        let dg = net.det.backward(&net.fusion, &trunk.taps, cache, dl, dd)?;
        for (&name, g) in net.fusion.taps.clone().iter().zip(dg.taps.iter()) {
            add_tap(name, g.clone())?;
        }
        net.det.accumulate(&dg);
        net.fusion.accumulate(&dg.fusion);
    }
    let refs = [tap_grads[0].as_ref(), tap_grads[1].as_ref(), tap_grads[2].as_ref()];
    if refs.iter().any(|r| r.is_some()) {
        let bg = net.backbone.backward(&trunk.backbone, refs)?;
        net.backbone.accumulate(&bg);
    }
    Ok(comps)
}

/// Momentum SGD with L2 weight decay:
/// `v ← μ·v − lr·(g + wd·p)`, `p ← p + v`.
/// Gradients are read from each tensor's gradient buffer (absent = zero).
/// All gradients are checked for finiteness before any parameter moves.
pub fn sgd_momentum_step(
    params: &mut [(String, &mut Tensor)],
    velocity: &mut Vec<Vec<f64>>,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if velocity.is_empty() {
        *velocity = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    }
    if velocity.len() != params.len() {
        return Err(Error::invalid("sgd", "velocity state does not match the parameter list"));
    }
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
    }
    for ((_, t), v) in params.iter_mut().zip(velocity.iter_mut()) {
        let grad = t.grad().map(|g| g.to_vec());
        let data = t.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            v[i] = momentum * v[i] - learning_rate * (g + weight_decay * data[i]);
            data[i] += v[i];
        }
    }
    Ok(())
}

/// One line of the loss trace: the mean of each component over the
/// preceding `log_every` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub loss: LossComponents,
}

impl TraceEntry {
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{} {:.9} {:.9} {:.9} {:.9} {:.9}",
            self.iter, l.total, l.rpn_cls, l.rpn_reg, l.det_cls, l.det_reg
        )
    }
}

pub fn write_trace<W: Write>(mut w: W, trace: &[TraceEntry]) -> std::io::Result<()> {
    for e in trace {
        writeln!(w, "{}", e.to_line())?;
    }
    Ok(())
}

/// Seed of the target-sampling stream for dataset item `index`. Fixed per
/// item so a frozen network sees identical targets on every visit.
fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Runs one full iteration on `sample`: forward, targets, loss, backward and
/// an optimizer step.
pub fn train_step(
    net: &mut Network,
    sample: &Sample,
    cfg: &TrainConfig,
    lr: f64,
    velocity: &mut Vec<Vec<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<LossComponents> {
    net.zero_grad();
    let trunk = forward_trunk(net, &sample.image)?;
    let targets = assign_targets(net, &trunk, sample, cfg, rng)?;
    let comps = loss_and_backward(net, trunk, &targets, cfg.lambda, LossParts::ALL, true)?;
    if !comps.total.is_finite() {
        return Err(Error::Diverged {
            iter: 0,
            loss: comps.total,
        });
    }
    let mut params = net.params_mut();
    sgd_momentum_step(&mut params, velocity, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(comps)
}

/// Trains `net` in place and returns the loss trace. `on_log` sees each trace
/// entry as it is produced.
pub fn train(
    net: &mut Network,
    dataset: &[Sample],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&TraceEntry),
) -> Result<Vec<TraceEntry>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut velocity = Vec::new();
    let mut trace = Vec::new();
    let mut window = LossComponents::default();
    let mut in_window = 0usize;
    for iter in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let idx = order.pop().unwrap();
        let lr = if cfg.lr_drop && iter * 4 >= cfg.iterations * 3 {
            cfg.learning_rate * 0.1
        } else {
            cfg.learning_rate
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, idx));
        let comps = match train_step(net, &dataset[idx], cfg, lr, &mut velocity, &mut rng) {
            Err(Error::Diverged { loss, .. }) => return Err(Error::Diverged { iter: iter + 1, loss }),
            other => other?,
        };
        window.total += comps.total;
        window.rpn_cls += comps.rpn_cls;
        window.rpn_reg += comps.rpn_reg;
        window.det_cls += comps.det_cls;
        window.det_reg += comps.det_reg;
        in_window += 1;
        if (iter + 1) % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            let n = in_window as f64;
            let entry = TraceEntry {
                iter: iter + 1,
                loss: LossComponents {
                    total: window.total / n,
                    rpn_cls: window.rpn_cls / n,
                    rpn_reg: window.rpn_reg / n,
                    det_cls: window.det_cls / n,
                    det_reg: window.det_reg / n,
                },
            };
            on_log(&entry);
            trace.push(entry);
            window = LossComponents::default();
            in_window = 0;
        }
    }
    Ok(trace)
}
