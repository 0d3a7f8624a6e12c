//! Finite-difference checks for every differentiable operation of the
//! pipeline. Each check draws a random point away from kinks (ReLU zeros,
//! max-pool ties, the smooth-L1 knee) and compares the analytic gradient of
//! a random linear projection of the output against central differences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_difference_check, GradCheck, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::boxes::BBox;
use crate::detection::DetectionHead;
use crate::error::Result;
use crate::fusion::{
    concat_shrink, concat_shrink_backward, l2norm_scale, l2norm_scale_backward, roi_pool, roi_pool_backward,
    FeatureTap, FeatureTapSet, Fusion, FusionConfig, L2NormScale, TapName,
};
use crate::layers::{
    conv2d, conv2d_backward, fully_connected, fully_connected_backward, maxpool2d, maxpool2d_backward, relu,
    relu_backward, smooth_l1, smooth_l1_backward, softmax_cross_entropy, softmax_cross_entropy_backward, Conv2d,
    Linear,
};
use crate::model::{FusionMode, ModelConfig, Network};
use crate::rpn::{AnchorConfig, ProposalConfig, RpnHead};
use crate::synth::generate_scene;
use crate::tensor::Tensor;
use crate::train::{assign_targets, forward_trunk, loss_and_backward, LossParts, TrainConfig};

pub const SUITE_OPS: [&str; 13] = [
    "conv2d",
    "maxpool2d",
    "relu",
    "fully_connected",
    "softmax_cross_entropy",
    "smooth_l1",
    "l2norm_scale",
    "concat_shrink",
    "roi_pool",
    "ms_roi_pool",
    "rpn_head",
    "detection_head",
    "multitask_loss",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub op: &'static str,
    pub seeds: usize,
    /// Worst relative error over all seeds.
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Runs every check for seeds `0..seeds`.
pub fn run_suite(seeds: usize, mut on_row: impl FnMut(&SuiteRow)) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for op in SUITE_OPS {
        let mut worst = GradCheck::default();
        for seed in 0..seeds as u64 {
            worst = worst.worst(check_op(op, seed)?);
        }
        let row = SuiteRow {
            op,
            seeds,
            max_rel_error: worst.max_rel_error,
            passed: worst.passes(DEFAULT_TOLERANCE),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// One check of `op` at `seed`.
pub fn check_op(op: &str, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ op.len() as u64);
    match op {
        "conv2d" => conv_check(&mut rng),
        "maxpool2d" => maxpool_check(&mut rng),
        "relu" => relu_check(&mut rng),
        "fully_connected" => fc_check(&mut rng),
        "softmax_cross_entropy" => softmax_check(&mut rng),
        "smooth_l1" => smooth_l1_check(&mut rng),
        "l2norm_scale" => l2norm_check(&mut rng),
        "concat_shrink" => concat_shrink_check(&mut rng),
        "roi_pool" => roi_pool_check(&mut rng),
        "ms_roi_pool" => ms_roi_pool_check(&mut rng),
        "rpn_head" => rpn_head_check(&mut rng),
        "detection_head" => detection_head_check(&mut rng),
        "multitask_loss" => end_to_end_check(seed),
        other => Err(crate::error::Error::invalid("gradcheck", format!("unknown op `{other}`"))),
    }
}

fn flat(ts: &[&Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn flat_mut(ts: &[&mut Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflat(ts: &mut [&mut Tensor], v: &[f64]) {
    let mut off = 0;
    for t in ts.iter_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&v[off..off + n]);
        off += n;
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values with pairwise gaps of at least 0.01, so max operations have no
/// near-ties within the perturbation.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("shape product matches")
}

fn conv_with(w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Conv2d {
    Conv2d::new(w.clone(), b.clone(), stride, padding).expect("valid conv")
}

fn conv_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let x = normal(&[1, 2, 5, 5], rng);
    let w = normal(&[3, 2, 3, 3], rng);
    let b = normal(&[3], rng);
    let stride = rng.random_range(1..=2);
    let layer = conv_with(&w, &b, stride, 1);
    let r = normal(conv2d(&x, &layer)?.shape(), rng);
    let g = conv2d_backward(&x, &layer, &r, true)?;
    let mut analytic = g.input.unwrap().into_data();
    analytic.extend(g.weight);
    analytic.extend(g.bias);
    Ok(finite_difference_check(&flat(&[&x, &w, &b]), &analytic, DEFAULT_STEP, |v| {
        let (mut x, mut w, mut b) = (x.clone(), w.clone(), b.clone());
        unflat(&mut [&mut x, &mut w, &mut b], v);
        conv2d(&x, &conv_with(&w, &b, stride, 1)).unwrap().dot(&r)
    }))
}

fn maxpool_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let x = spaced(&[1, 3, 6, 6], rng);
    let (y, argmax) = maxpool2d(&x, 2, 2)?;
    let r = normal(y.shape(), rng);
    let analytic = maxpool2d_backward(x.shape(), &argmax, &r).into_data();
    Ok(finite_difference_check(x.data(), &analytic, DEFAULT_STEP, |v| {
        let x = Tensor::new(&[1, 3, 6, 6], v.to_vec()).unwrap();
        maxpool2d(&x, 2, 2).unwrap().0.dot(&r)
    }))
}

fn relu_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let x = Tensor::from_fn(&[2, 10], |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let r = normal(&[2, 10], rng);
    let analytic = relu_backward(&x, &r).into_data();
    Ok(finite_difference_check(x.data(), &analytic, DEFAULT_STEP, |v| {
        relu(&Tensor::new(&[2, 10], v.to_vec()).unwrap()).dot(&r)
    }))
}

fn fc_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let x = normal(&[4, 5], rng);
    let w = normal(&[5, 3], rng);
    let b = normal(&[3], rng);
    let layer = Linear::new(w.clone(), b.clone())?;
    let r = normal(&[4, 3], rng);
    let g = fully_connected_backward(&x, &layer, &r)?;
    let mut analytic = g.input.into_data();
    analytic.extend(g.weight);
    analytic.extend(g.bias);
    Ok(finite_difference_check(&flat(&[&x, &w, &b]), &analytic, DEFAULT_STEP, |v| {
        let (mut x, mut w, mut b) = (x.clone(), w.clone(), b.clone());
        unflat(&mut [&mut x, &mut w, &mut b], v);
        fully_connected(&x, &Linear::new(w, b).unwrap()).unwrap().dot(&r)
    }))
}

fn softmax_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let logits = Tensor::uniform(&[4, 3], -3.0, 3.0, rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let (_, probs) = softmax_cross_entropy(&logits, &labels)?;
    let analytic = softmax_cross_entropy_backward(&probs, &labels).into_data();
    Ok(finite_difference_check(logits.data(), &analytic, DEFAULT_STEP, |v| {
        softmax_cross_entropy(&Tensor::new(&[4, 3], v.to_vec()).unwrap(), &labels)
            .unwrap()
            .0
    }))
}

fn smooth_l1_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let target = normal(&[3, 4], rng);
    // Differences drawn from either side of the knee, at least 0.05 away.
    let pred = Tensor::from_fn(&[3, 4], |i| {
        let d = if rng.random_bool(0.5) {
            rng.random_range(0.0..0.95)
        } else {
            rng.random_range(1.05..2.5)
        };
        target.data()[i] + if rng.random_bool(0.5) { d } else { -d }
    });
    let mask = Tensor::from_fn(&[3, 4], |_| rng.random_bool(0.7) as u8 as f64);
    let analytic = smooth_l1_backward(&pred, &target, &mask)?.into_data();
    Ok(finite_difference_check(pred.data(), &analytic, DEFAULT_STEP, |v| {
        smooth_l1(&Tensor::new(&[3, 4], v.to_vec()).unwrap(), &target, &mask).unwrap()
    }))
}

fn l2norm_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let x = normal(&[1, 4, 3, 3], rng);
    let gamma = Tensor::uniform(&[4], 1.0, 10.0, rng);
    let layer = |g: &Tensor| L2NormScale {
        gamma: g.clone(),
        epsilon: 1e-10,
    };
    let r = normal(x.shape(), rng);
    let (dx, dgamma) = l2norm_scale_backward(&x, &layer(&gamma), &r)?;
    let mut analytic = dx.into_data();
    analytic.extend(dgamma);
    Ok(finite_difference_check(&flat(&[&x, &gamma]), &analytic, DEFAULT_STEP, |v| {
        let (mut x, mut g) = (x.clone(), gamma.clone());
        unflat(&mut [&mut x, &mut g], v);
        l2norm_scale(&x, &layer(&g)).unwrap().dot(&r)
    }))
}

fn concat_shrink_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let a = normal(&[1, 2, 3, 3], rng);
    let b = normal(&[1, 3, 3, 3], rng);
    let w = normal(&[4, 5, 1, 1], rng);
    let bias = normal(&[4], rng);
    let names = [TapName::Tap3, TapName::Tap5];
    let r = normal(&[1, 4, 3, 3], rng);
    let (parts, g) = concat_shrink_backward(&[&a, &b], &names, &conv_with(&w, &bias, 1, 0), &r)?;
    let mut analytic = flat(&[&parts[0], &parts[1]]);
    analytic.extend(g.weight);
    analytic.extend(g.bias);
    Ok(finite_difference_check(&flat(&[&a, &b, &w, &bias]), &analytic, DEFAULT_STEP, |v| {
        let (mut a, mut b, mut w, mut bias) = (a.clone(), b.clone(), w.clone(), bias.clone());
        unflat(&mut [&mut a, &mut b, &mut w, &mut bias], v);
        concat_shrink(&[&a, &b], &names, &conv_with(&w, &bias, 1, 0))
            .unwrap()
            .dot(&r)
    }))
}

fn random_roi(rng: &mut ChaCha8Rng, extent: f64, min: f64, max: f64) -> BBox {
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h).expect("positive extent")
}

fn roi_pool_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let map = spaced(&[1, 3, 8, 8], rng);
    let roi = random_roi(rng, 32.0, 4.0, 30.0);
    let p = 3;
    let (y, argmax) = roi_pool(&map, &roi, 4, p)?;
    let r = normal(y.shape(), rng);
    let mut analytic = vec![0.0; map.len()];
    roi_pool_backward(map.shape(), &argmax, r.data(), &mut analytic);
    Ok(finite_difference_check(map.data(), &analytic, DEFAULT_STEP, |v| {
        let m = Tensor::new(&[1, 3, 8, 8], v.to_vec()).unwrap();
        roi_pool(&m, &roi, 4, p).unwrap().0.dot(&r)
    }))
}

/// Tap maps for a 32×32 image: 8×8 at stride 4, 4×4 at 8, 2×2 at 16.
fn tiny_taps(rng: &mut ChaCha8Rng, channels: [usize; 3]) -> FeatureTapSet {
    let sizes = [8, 4, 2];
    let strides = [4, 8, 16];
    FeatureTapSet {
        taps: TapName::ALL
            .iter()
            .enumerate()
            .map(|(i, &name)| {
                let mut map = spaced(&[1, channels[i], sizes[i], sizes[i]], rng);
                // Shifted positive, as after ReLU.
                let shift = 0.01 * map.len() as f64;
                map.data_mut().iter_mut().for_each(|v| *v += shift);
                FeatureTap {
                    name,
                    map,
                    stride: strides[i],
                }
            })
            .collect(),
    }
}

fn tap_params(taps: &FeatureTapSet) -> Vec<f64> {
    flat(&taps.taps.iter().map(|t| &t.map).collect::<Vec<_>>())
}

fn set_taps(taps: &mut FeatureTapSet, v: &[f64]) {
    let mut refs: Vec<&mut Tensor> = taps.taps.iter_mut().map(|t| &mut t.map).collect();
    unflat(&mut refs, v);
}

fn fusion_tensors(f: &mut Fusion) -> Vec<&mut Tensor> {
    let mut v: Vec<&mut Tensor> = f.norms.iter_mut().map(|n| &mut n.gamma).collect();
    v.push(&mut f.shrink.weight);
    v.push(&mut f.shrink.bias);
    v
}

fn fusion_flat(f: &Fusion) -> Vec<f64> {
    let mut v: Vec<f64> = f.norms.iter().flat_map(|n| n.gamma.data().to_vec()).collect();
    v.extend(flat(&[&f.shrink.weight, &f.shrink.bias]));
    v
}

fn tiny_fusion(rng: &mut ChaCha8Rng, channels: [usize; 3]) -> Fusion {
    let cfg = FusionConfig {
        shrink_channels: 4,
        ..Default::default()
    };
    let taps: Vec<(TapName, usize)> = TapName::ALL.iter().copied().zip(channels).collect();
    let mut f = Fusion::new(&taps, &cfg, rng);
    for n in f.norms.iter_mut() {
        n.gamma = Tensor::uniform(n.gamma.shape(), 2.0, 10.0, rng);
    }
    f.shrink.bias = normal(f.shrink.bias.shape(), rng);
    f
}

fn ms_roi_pool_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let channels = [2, 3, 3];
    let taps = tiny_taps(rng, channels);
    let fusion = tiny_fusion(rng, channels);
    let rois: Vec<BBox> = (0..2).map(|_| random_roi(rng, 32.0, 4.0, 28.0)).collect();
    let p = 2;
    let (y, cache) = fusion.ms_roi_pool(&taps, &rois, p)?;
    let r = normal(y.shape(), rng);
    let (tg, fg) = fusion.ms_roi_pool_backward(&taps, &cache, &r)?;
    let mut analytic = flat(&tg.iter().collect::<Vec<_>>());
    analytic.extend(fg.gammas.concat());
    analytic.extend(fg.shrink.weight);
    analytic.extend(fg.shrink.bias);
    let mut point = tap_params(&taps);
    let n_taps = point.len();
    point.extend(fusion_flat(&fusion));
    Ok(finite_difference_check(&point, &analytic, DEFAULT_STEP, |v| {
        let (mut t, mut f) = (taps.clone(), fusion.clone());
        set_taps(&mut t, &v[..n_taps]);
        unflat(&mut fusion_tensors(&mut f), &v[n_taps..]);
        f.ms_roi_pool(&t, &rois, p).unwrap().0.dot(&r)
    }))
}

fn head_tensors(h: &mut RpnHead) -> Vec<&mut Tensor> {
    vec![
        &mut h.conv.weight,
        &mut h.conv.bias,
        &mut h.cls.weight,
        &mut h.cls.bias,
        &mut h.bbox.weight,
        &mut h.bbox.bias,
    ]
}

fn rpn_head_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let x = normal(&[1, 4, 3, 3], rng);
    let mut head = RpnHead::new(4, 5, 2, rng);
    head.conv.bias = normal(&[5], rng);
    let (out, cache) = head.forward(&x)?;
    let rl = normal(out.logits.shape(), rng);
    let rd = normal(out.deltas.shape(), rng);
    let g = head.backward(&cache, &rl, &rd)?;
    let mut analytic = g.input.into_data();
    for part in [&g.conv, &g.cls, &g.bbox] {
        analytic.extend(&part.weight);
        analytic.extend(&part.bias);
    }
    let mut point = x.data().to_vec();
    point.extend(flat_mut(&head_tensors(&mut head.clone())));
    Ok(finite_difference_check(&point, &analytic, DEFAULT_STEP, |v| {
        let (mut x, mut h) = (x.clone(), head.clone());
        let n = x.len();
        x.data_mut().copy_from_slice(&v[..n]);
        unflat(&mut head_tensors(&mut h), &v[n..]);
        let (o, _) = h.forward(&x).unwrap();
        o.logits.dot(&rl) + o.deltas.dot(&rd)
    }))
}

fn det_tensors(h: &mut DetectionHead) -> Vec<&mut Tensor> {
    vec![
        &mut h.fc1.weight,
        &mut h.fc1.bias,
        &mut h.fc2.weight,
        &mut h.fc2.bias,
        &mut h.cls.weight,
        &mut h.cls.bias,
        &mut h.bbox.weight,
        &mut h.bbox.bias,
    ]
}

fn detection_head_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let channels = [2, 3, 3];
    let taps = tiny_taps(rng, channels);
    let fusion = tiny_fusion(rng, channels);
    let mut head = DetectionHead::new(4, 2, 6, rng);
    head.fc1.bias = normal(&[6], rng);
    head.fc2.bias = normal(&[6], rng);
    let rois: Vec<BBox> = (0..3).map(|_| random_roi(rng, 32.0, 4.0, 28.0)).collect();
    let (out, cache) = head.forward(&fusion, &taps, &rois)?.expect("non-empty ROIs");
    let rl = normal(out.logits.shape(), rng);
    let rd = normal(out.deltas.shape(), rng);
    let g = head.backward(&fusion, &taps, &cache, &rl, &rd)?;
    let mut analytic = flat(&g.taps.iter().collect::<Vec<_>>());
    analytic.extend(g.fusion.gammas.concat());
    analytic.extend(&g.fusion.shrink.weight);
    analytic.extend(&g.fusion.shrink.bias);
    for part in [&g.fc1, &g.fc2, &g.cls, &g.bbox] {
        analytic.extend(&part.weight);
        analytic.extend(&part.bias);
    }
    let mut point = tap_params(&taps);
    let n_taps = point.len();
    point.extend(fusion_flat(&fusion));
    let n_fusion = point.len();
    point.extend(flat_mut(&det_tensors(&mut head.clone())));
    Ok(finite_difference_check(&point, &analytic, DEFAULT_STEP, |v| {
        let (mut t, mut f, mut h) = (taps.clone(), fusion.clone(), head.clone());
        set_taps(&mut t, &v[..n_taps]);
        unflat(&mut fusion_tensors(&mut f), &v[n_taps..n_fusion]);
        unflat(&mut det_tensors(&mut h), &v[n_fusion..]);
        let (o, _) = h.forward(&f, &t, &rois).unwrap().unwrap();
        o.logits.dot(&rl) + o.deltas.dot(&rd)
    }))
}

/// A model small enough for a full finite-difference sweep: 32×32 input,
/// two anchors per cell, three proposals.
pub fn tiny_model_config() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        mode: FusionMode::MultiScale,
        in_channels: 1,
        stage_channels: [3, 4, 4, 6, 6],
        anchors: AnchorConfig {
            base_stride: 16,
            scales: vec![0.5, 1.0],
            ratios: vec![1.0],
        },
        fusion: FusionConfig {
            shrink_channels: 4,
            roi_pool_size: 2,
            ..Default::default()
        },
        rpn_hidden: 4,
        head_hidden: 5,
    };
    let train = TrainConfig {
        image_size: 32,
        proposals: ProposalConfig {
            pre_nms_top_n: 8,
            post_nms_top_n: 3,
            nms_thresh: 0.7,
            min_size: 1.0,
        },
        ..Default::default()
    };
    (model, train)
}

/// Gradient of the full multi-task loss with respect to every parameter of a
/// tiny network, targets held fixed.
pub fn end_to_end_check(seed: u64) -> Result<GradCheck> {
    let (model, cfg) = tiny_model_config();
    let mut net = Network::new(model, seed);
    // Positive biases keep most units active, so no pre-activation sits at
    // exactly zero and tap vectors stay away from the zero vector where the
    // normalization is singular.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for (name, t) in net.params_mut() {
        if name.ends_with(".bias") {
            *t = Tensor::uniform(t.shape(), 0.5, 1.0, &mut rng);
        }
    }
    let scene = generate_scene(seed as usize, 32, (10, 16), seed)?;
    let mut sample = scene.to_sample();
    // Continuous jitter breaks the exact ties of 8-bit quantized pixels.
    for v in sample.image.data_mut() {
        *v += rng.random_range(-2e-3..2e-3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trunk = forward_trunk(&net, &sample.image)?;
    let targets = assign_targets(&net, &trunk, &sample, &cfg, &mut rng)?;
    net.zero_grad();
    loss_and_backward(&mut net, trunk, &targets, cfg.lambda, LossParts::ALL, true)?;
    let analytic = net.flat_grads();
    let point = net.flat_params();
    let mut probe = net.clone();
    Ok(finite_difference_check(&point, &analytic, DEFAULT_STEP, |v| {
        probe.set_flat_params(v);
        let trunk = forward_trunk(&probe, &sample.image).unwrap();
        loss_and_backward(&mut probe, trunk, &targets, cfg.lambda, LossParts::ALL, false)
            .unwrap()
            .total
    }))
}
