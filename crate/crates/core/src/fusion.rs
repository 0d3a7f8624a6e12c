//! Multi-scale feature fusion.
//!
//! Three backbone taps (strides 4, 8 and 16) are brought to a common spatial
//! size, L2-normalized along the channel axis, re-weighted by a learnable
//! per-channel `gamma`, concatenated in the fixed order tap3, tap4, tap5 and
//! shrunk back to the tap5 channel count with a 1×1 convolution.
//!
//! Two routes reach the common size. The proposal branch max-pools the
//! shallower maps down to the tap5 grid ([`sync_downsample`]); the detection
//! branch ROI-pools every tap to the same `P×P` grid ([`roi_pool`]). Both
//! branches then share the same normalization and shrink parameters.

use std::fmt;

use rand::Rng;

use crate::boxes::{project_roi, BBox};
use crate::error::{Error, Result};
use crate::layers::{conv2d, conv2d_backward, maxpool2d, maxpool2d_backward, Conv2d, ConvGrads};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TapName {
    Tap3,
    Tap4,
    Tap5,
}

impl TapName {
    pub const ALL: [TapName; 3] = [TapName::Tap3, TapName::Tap4, TapName::Tap5];

    pub fn as_str(&self) -> &'static str {
        match self {
            TapName::Tap3 => "tap3",
            TapName::Tap4 => "tap4",
            TapName::Tap5 => "tap5",
        }
    }
}

impl fmt::Display for TapName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTap {
    pub name: TapName,
    /// `1×C×H×W` feature map.
    pub map: Tensor,
    pub stride: usize,
}

/// The three tapped maps, always ordered tap3, tap4, tap5.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTapSet {
    pub taps: Vec<FeatureTap>,
}

impl FeatureTapSet {
    pub fn get(&self, name: TapName) -> &FeatureTap {
        self.taps
            .iter()
            .find(|t| t.name == name)
            .expect("tap set holds every tap")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub shrink_channels: usize,
    pub roi_pool_size: usize,
    pub gamma_init: f64,
    pub epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            shrink_channels: 64,
            roi_pool_size: 7,
            gamma_init: 10.0,
            epsilon: 1e-10,
        }
    }
}

/// Channel-axis L2 normalization followed by a per-channel scale `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct L2NormScale {
    pub gamma: Tensor,
    pub epsilon: f64,
}

impl L2NormScale {
    pub fn new(channels: usize, gamma_init: f64, epsilon: f64) -> Self {
        L2NormScale {
            gamma: Tensor::full(&[channels], gamma_init),
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

fn check_norm(map: &Tensor, layer: &L2NormScale) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = map.dims4()?;
    if c != layer.channels() {
        return Err(Error::shape("l2norm_scale", map.shape(), layer.gamma.shape()));
    }
    Ok((n, c, h * w))
}

/// `y = gamma ⊙ x / sqrt(‖x‖² + ε²)` at every `(n, h, w)`, with `x` the
/// channel vector there.
pub fn l2norm_scale(map: &Tensor, layer: &L2NormScale) -> Result<Tensor> {
    let (n, c, hw) = check_norm(map, layer)?;
    let eps2 = layer.epsilon * layer.epsilon;
    let gamma = layer.gamma.data();
    let mut out = map.clone();
    let x = map.data();
    let y = out.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for s in 0..hw {
            let norm2: f64 = (0..c).map(|k| x[base + k * hw + s].powi(2)).sum();
            let inv = 1.0 / (norm2 + eps2).sqrt();
            for k in 0..c {
                let i = base + k * hw + s;
                y[i] = gamma[k] * x[i] * inv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`l2norm_scale`] with respect to the map and to `gamma`.
pub fn l2norm_scale_backward(map: &Tensor, layer: &L2NormScale, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (n, c, hw) = check_norm(map, layer)?;
    if !map.same_shape(grad_out) {
        return Err(Error::shape("l2norm_scale_backward", map.shape(), grad_out.shape()));
    }
    let eps2 = layer.epsilon * layer.epsilon;
    let gamma = layer.gamma.data();
    let x = map.data();
    let dy = grad_out.data();
    let mut dx = Tensor::zeros(map.shape());
    let mut dgamma = vec![0.0; c];
    let dxd = dx.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for s in 0..hw {
            let mut norm2 = 0.0;
            let mut proj = 0.0;
            for k in 0..c {
                let i = base + k * hw + s;
                norm2 += x[i] * x[i];
                proj += gamma[k] * dy[i] * x[i];
            }
            let inv = 1.0 / (norm2 + eps2).sqrt();
            let inv3 = inv * inv * inv;
            for k in 0..c {
                let i = base + k * hw + s;
                dgamma[k] += dy[i] * x[i] * inv;
                dxd[i] = gamma[k] * dy[i] * inv - x[i] * proj * inv3;
            }
        }
    }
    Ok((dx, dgamma))
}

/// Max-pools a tap down to `target_stride` (window = stride = ratio of the
/// strides). Identity when the strides already agree. The argmax map is
/// `None` in the identity case.
pub fn sync_downsample(tap: &FeatureTap, target_stride: usize) -> Result<(Tensor, Option<Vec<usize>>)> {
    if target_stride == 0 || tap.stride == 0 || !target_stride.is_multiple_of(tap.stride) {
        return Err(Error::invalid(
            "sync_downsample",
            format!(
                "target stride {target_stride} is not a multiple of {} stride {}",
                tap.name, tap.stride
            ),
        ));
    }
    let ratio = target_stride / tap.stride;
    if ratio == 1 {
        return Ok((tap.map.clone(), None));
    }
    let (pooled, argmax) = maxpool2d(&tap.map, ratio, ratio)?;
    Ok((pooled, Some(argmax)))
}

/// Concatenates equally sized `N×Cᵢ×H×W` maps along the channel axis.
pub fn concat_channels(maps: &[&Tensor], names: &[TapName]) -> Result<Tensor> {
    let (n, _, h, w) = maps[0].dims4()?;
    let mut total = 0;
    for (m, name) in maps.iter().zip(names) {
        let (mn, mc, mh, mw) = m.dims4()?;
        if (mn, mh, mw) != (n, h, w) {
            return Err(Error::invalid(
                "concat_shrink",
                format!(
                    "{} is {:?} but {} is {:?}",
                    names[0],
                    maps[0].shape(),
                    name,
                    m.shape()
                ),
            ));
        }
        total += mc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for m in maps {
            data.extend_from_slice(m.image(b));
        }
    }
    debug_assert_eq!(data.len(), n * total * hw);
    Tensor::new(&[n, total, h, w], data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = grad.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::shape("split_channels", grad.shape(), channels));
    }
    let hw = h * w;
    let mut parts: Vec<Vec<f64>> = channels.iter().map(|&k| Vec::with_capacity(n * k * hw)).collect();
    for b in 0..n {
        let img = grad.image(b);
        let mut off = 0;
        for (part, &k) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&img[off * hw..(off + k) * hw]);
            off += k;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &k)| Tensor::new(&[n, k, h, w], d))
        .collect()
}

/// Channel concatenation in the given order followed by the 1×1 `shrink`.
pub fn concat_shrink(maps: &[&Tensor], names: &[TapName], shrink: &Conv2d) -> Result<Tensor> {
    let cat = concat_channels(maps, names)?;
    if cat.shape()[1] != shrink.in_channels() {
        return Err(Error::shape("concat_shrink", cat.shape(), shrink.weight.shape()));
    }
    conv2d(&cat, shrink)
}

/// Gradients of [`concat_shrink`]: one tensor per input map plus the shrink
/// parameter gradients.
pub fn concat_shrink_backward(
    maps: &[&Tensor],
    names: &[TapName],
    shrink: &Conv2d,
    grad_out: &Tensor,
) -> Result<(Vec<Tensor>, ConvGrads)> {
    let cat = concat_channels(maps, names)?;
    let g = conv2d_backward(&cat, shrink, grad_out, true)?;
    let channels: Vec<usize> = maps.iter().map(|m| m.shape()[1]).collect();
    let parts = split_channels(g.input.as_ref().expect("input gradient requested"), &channels)?;
    Ok((parts, g))
}

/// Partitions `len` cells into `p` bins with rounded equal-fraction edges.
/// Empty bins borrow the nearest nonempty bin (lower index on ties).
pub fn pool_bins(len: usize, p: usize) -> Vec<(usize, usize)> {
    assert!(len > 0 && p > 0);
    let edge = |i: usize| (2 * i * len + p) / (2 * p);
    let raw: Vec<(usize, usize)> = (0..p).map(|i| (edge(i), edge(i + 1))).collect();
    let nonempty = |i: usize| raw[i].1 > raw[i].0;
    (0..p)
        .map(|i| {
            if nonempty(i) {
                return raw[i];
            }
            for d in 1..p {
                if i >= d && nonempty(i - d) {
                    return raw[i - d];
                }
                if i + d < p && nonempty(i + d) {
                    return raw[i + d];
                }
            }
            unreachable!("at least one bin is nonempty when len > 0")
        })
        .collect()
}

/// ROI max pooling of a `1×C×H×W` map to `C×P×P`. Returns the pooled values
/// and the linear index into `map` of each winner.
pub fn roi_pool(map: &Tensor, roi: &BBox, stride: usize, p: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = map.dims4()?;
    if n != 1 {
        return Err(Error::invalid("roi_pool", format!("expected a single image, got N={n}")));
    }
    if p == 0 || stride == 0 {
        return Err(Error::invalid("roi_pool", "pool size and stride must be positive"));
    }
    let rect = project_roi(roi, stride).fit(w, h);
    let xbins = pool_bins(rect.width(), p);
    let ybins = pool_bins(rect.height(), p);
    let x = map.data();
    let mut out = Tensor::zeros(&[c, p, p]);
    let mut argmax = vec![0usize; c * p * p];
    let y = out.data_mut();
    for k in 0..c {
        let plane = k * h * w;
        for (py, &(y0, y1)) in ybins.iter().enumerate() {
            for (px, &(x0, x1)) in xbins.iter().enumerate() {
                let mut best = plane + (rect.y1 + y0) * w + rect.x1 + x0;
                let mut best_v = x[best];
                for yy in rect.y1 + y0..rect.y1 + y1 {
                    for xx in rect.x1 + x0..rect.x1 + x1 {
                        let i = plane + yy * w + xx;
                        if x[i] > best_v {
                            best_v = x[i];
                            best = i;
                        }
                    }
                }
                let o = (k * p + py) * p + px;
                y[o] = best_v;
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

/// Scatters pooled gradients back onto a map of `map_shape`.
pub fn roi_pool_backward(map_shape: &[usize], argmax: &[usize], grad_out: &[f64], into: &mut [f64]) {
    debug_assert_eq!(into.len(), map_shape.iter().product::<usize>());
    for (&i, &g) in argmax.iter().zip(grad_out) {
        into[i] += g;
    }
}

/// The shared fusion parameters: one [`L2NormScale`] per active tap plus the
/// 1×1 shrink convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub taps: Vec<TapName>,
    pub norms: Vec<L2NormScale>,
    pub shrink: Conv2d,
}

#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub gammas: Vec<Vec<f64>>,
    pub shrink: ConvGrads,
}

/// Intermediate values of [`Fusion::fuse`] needed by the backward pass.
#[derive(Debug, Clone)]
pub struct FuseCache {
    inputs: Vec<Tensor>,
    normed: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct RpnFuseCache {
    fuse: FuseCache,
    argmax: Vec<Option<Vec<usize>>>,
    shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct RoiFuseCache {
    fuse: FuseCache,
    /// Per active tap, per ROI: argmax indices into the tap map.
    argmax: Vec<Vec<Vec<usize>>>,
}

impl Fusion {
    /// Fresh fusion parameters for the given taps and their channel counts.
    pub fn new<R: Rng + ?Sized>(taps: &[(TapName, usize)], cfg: &FusionConfig, rng: &mut R) -> Self {
        let total: usize = taps.iter().map(|(_, c)| c).sum();
        Fusion {
            taps: taps.iter().map(|(n, _)| *n).collect(),
            norms: taps
                .iter()
                .map(|(_, c)| L2NormScale::new(*c, cfg.gamma_init, cfg.epsilon))
                .collect(),
            shrink: Conv2d::glorot(total, cfg.shrink_channels, 1, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.shrink.out_channels()
    }

    /// Normalizes, concatenates and shrinks spatially synchronized maps, one
    /// per active tap.
    pub fn fuse(&self, maps: Vec<Tensor>) -> Result<(Tensor, FuseCache)> {
        if maps.len() != self.norms.len() {
            return Err(Error::invalid(
                "fusion",
                format!("expected {} maps, got {}", self.norms.len(), maps.len()),
            ));
        }
        let normed = maps
            .iter()
            .zip(&self.norms)
            .map(|(m, layer)| l2norm_scale(m, layer))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = normed.iter().collect();
        let out = concat_shrink(&refs, &self.taps, &self.shrink)?;
        Ok((out, FuseCache { inputs: maps, normed }))
    }

    pub fn fuse_backward(&self, cache: &FuseCache, grad_out: &Tensor) -> Result<(Vec<Tensor>, FusionGrads)> {
        let refs: Vec<&Tensor> = cache.normed.iter().collect();
        let (parts, shrink) = concat_shrink_backward(&refs, &self.taps, &self.shrink, grad_out)?;
        let mut grads = Vec::with_capacity(parts.len());
        let mut gammas = Vec::with_capacity(parts.len());
        for ((g, x), layer) in parts.iter().zip(&cache.inputs).zip(&self.norms) {
            let (dx, dgamma) = l2norm_scale_backward(x, layer, g)?;
            grads.push(dx);
            gammas.push(dgamma);
        }
        Ok((grads, FusionGrads { gammas, shrink }))
    }

    /// Proposal-branch fusion: every active tap is max-pooled to the stride of
    /// the coarsest tap, then fused.
    pub fn rpn_features(&self, taps: &FeatureTapSet) -> Result<(Tensor, RpnFuseCache)> {
        let target = taps.taps.iter().map(|t| t.stride).max().unwrap_or(1);
        let mut maps = Vec::new();
        let mut argmax = Vec::new();
        let mut shapes = Vec::new();
        for &name in &self.taps {
            let tap = taps.get(name);
            let (m, a) = sync_downsample(tap, target)?;
            maps.push(m);
            argmax.push(a);
            shapes.push(tap.map.shape().to_vec());
        }
        let (out, fuse) = self.fuse(maps)?;
        Ok((out, RpnFuseCache { fuse, argmax, shapes }))
    }

    /// Gradients with respect to each active tap (in `self.taps` order) and the
    /// fusion parameters.
    pub fn rpn_features_backward(&self, cache: &RpnFuseCache, grad_out: &Tensor) -> Result<(Vec<Tensor>, FusionGrads)> {
        let (grads, fg) = self.fuse_backward(&cache.fuse, grad_out)?;
        let tap_grads = grads
            .into_iter()
            .zip(&cache.argmax)
            .zip(&cache.shapes)
            .map(|((g, a), shape)| match a {
                Some(a) => maxpool2d_backward(shape, a, &g),
                None => g,
            })
            .collect();
        Ok((tap_grads, fg))
    }

    /// Multi-scale ROI pooling for a batch of ROIs: `R×S×P×P` where `S` is
    /// the shrink channel count.
    pub fn ms_roi_pool(&self, taps: &FeatureTapSet, rois: &[BBox], p: usize) -> Result<(Tensor, RoiFuseCache)> {
        if rois.is_empty() {
            return Err(Error::invalid("ms_roi_pool", "no ROIs"));
        }
        let mut maps = Vec::new();
        let mut argmax = Vec::new();
        for &name in &self.taps {
            let tap = taps.get(name);
            let c = tap.map.shape()[1];
            let mut data = Vec::with_capacity(rois.len() * c * p * p);
            let mut per_roi = Vec::with_capacity(rois.len());
            for roi in rois {
                let (pooled, a) = roi_pool(&tap.map, roi, tap.stride, p)?;
                data.extend_from_slice(pooled.data());
                per_roi.push(a);
            }
            maps.push(Tensor::new(&[rois.len(), c, p, p], data)?);
            argmax.push(per_roi);
        }
        let (out, fuse) = self.fuse(maps)?;
        Ok((out, RoiFuseCache { fuse, argmax }))
    }

    pub fn ms_roi_pool_backward(
        &self,
        taps: &FeatureTapSet,
        cache: &RoiFuseCache,
        grad_out: &Tensor,
    ) -> Result<(Vec<Tensor>, FusionGrads)> {
        let (grads, fg) = self.fuse_backward(&cache.fuse, grad_out)?;
        let mut tap_grads = Vec::with_capacity(grads.len());
        for ((g, &name), argmax) in grads.iter().zip(&self.taps).zip(&cache.argmax) {
            let map = &taps.get(name).map;
            let mut acc = Tensor::zeros(map.shape());
            let per = g.len() / argmax.len();
            for (r, a) in argmax.iter().enumerate() {
                roi_pool_backward(map.shape(), a, &g.data()[r * per..(r + 1) * per], acc.data_mut());
            }
            tap_grads.push(acc);
        }
        Ok((tap_grads, fg))
    }

    pub fn accumulate(&mut self, grads: &FusionGrads) {
        for (layer, g) in self.norms.iter_mut().zip(&grads.gammas) {
            layer.gamma.accumulate_grad(g);
        }
        self.shrink.accumulate(&grads.shrink);
    }
}

/// Single-ROI multi-scale pooling: `S×P×P`.
pub fn ms_roi_pool(taps: &FeatureTapSet, roi: &BBox, fusion: &Fusion, p: usize) -> Result<Tensor> {
    let (out, _) = fusion.ms_roi_pool(taps, std::slice::from_ref(roi), p)?;
    let s = out.shape()[1];
    out.reshape(&[s, p, p])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn norm_of(t: &Tensor, b: usize, s: usize) -> f64 {
        let (_, c, h, w) = t.dims4().unwrap();
        (0..c)
            .map(|k| t.data()[(b * c + k) * h * w + s].powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn normalizes_three_four_five() {
        let x = Tensor::new(&[1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let layer = L2NormScale::new(2, 1.0, 0.0);
        let y = l2norm_scale(&x, &layer).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unit_gamma_gives_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[2, 5, 3, 4], -2.0, 2.0, &mut rng);
        let y = l2norm_scale(&x, &L2NormScale::new(5, 1.0, 1e-10)).unwrap();
        for b in 0..2 {
            for s in 0..12 {
                assert!((norm_of(&y, b, s) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_vector_stays_finite() {
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        let layer = L2NormScale::new(3, 10.0, 1e-10);
        let y = l2norm_scale(&x, &layer).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (dx, dg) = l2norm_scale_backward(&x, &layer, &Tensor::full(&[1, 3, 2, 2], 1.0)).unwrap();
        assert!(dx.all_finite() && dg.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(l2norm_scale(&x, &L2NormScale::new(4, 1.0, 1e-10)).is_err());
    }

    #[test]
    fn downsample_windows_follow_strides() {
        let tap = |name, stride, size| FeatureTap {
            name,
            map: Tensor::full(&[1, 2, size, size], 0.5),
            stride,
        };
        let (m3, a3) = sync_downsample(&tap(TapName::Tap3, 4, 32), 16).unwrap();
        assert_eq!(m3.shape(), &[1, 2, 8, 8]);
        assert!(a3.is_some());
        assert!(m3.data().iter().all(|&v| v == 0.5));
        let (m4, _) = sync_downsample(&tap(TapName::Tap4, 8, 16), 16).unwrap();
        assert_eq!(m4.shape(), &[1, 2, 8, 8]);
        let t5 = tap(TapName::Tap5, 16, 8);
        let (m5, a5) = sync_downsample(&t5, 16).unwrap();
        assert_eq!(m5, t5.map);
        assert!(a5.is_none());
        assert!(sync_downsample(&tap(TapName::Tap3, 4, 32), 10).is_err());
    }

    #[test]
    fn concat_shrink_rejects_spatial_mismatch_by_name() {
        let a = Tensor::zeros(&[1, 2, 4, 4]);
        let b = Tensor::zeros(&[1, 2, 2, 2]);
        let shrink = Conv2d::new(Tensor::zeros(&[1, 4, 1, 1]), Tensor::zeros(&[1]), 1, 0).unwrap();
        let err = concat_shrink(&[&a, &b], &[TapName::Tap3, TapName::Tap4], &shrink).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tap3") && msg.contains("tap4"), "{msg}");
    }

    #[test]
    fn concat_shrink_selecting_tap5_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps: Vec<Tensor> = [2, 3, 2]
            .iter()
            .map(|&c| Tensor::uniform(&[1, c, 3, 3], -1.0, 1.0, &mut rng))
            .collect();
        let mut w = Tensor::zeros(&[2, 7, 1, 1]);
        w.data_mut()[5] = 1.0;
        w.data_mut()[7 + 6] = 1.0;
        let shrink = Conv2d::new(w, Tensor::zeros(&[2]), 1, 0).unwrap();
        let refs: Vec<&Tensor> = maps.iter().collect();
        let out = concat_shrink(&refs, &TapName::ALL, &shrink).unwrap();
        assert_eq!(out, maps[2]);
    }

    #[test]
    fn bins_cover_and_borrow() {
        assert_eq!(pool_bins(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(pool_bins(7, 7), (0..7).map(|i| (i, i + 1)).collect::<Vec<_>>());
        assert_eq!(pool_bins(1, 7), vec![(0, 1); 7]);
        for (len, p) in [(3, 7), (2, 7), (5, 3), (10, 7), (20, 7)] {
            let bins = pool_bins(len, p);
            assert!(bins.iter().all(|&(a, b)| b > a && b <= len), "{len} {p} {bins:?}");
        }
    }

    #[test]
    fn roi_pool_quadrants() {
        let vals = [3.0, 1.0, 9.0, 2.0, 4.0, 0.0, 5.0, 7.0, 6.0, 15.0, 8.0, 10.0, 11.0, 12.0, 13.0, 14.0];
        let map = Tensor::new(&[1, 1, 4, 4], vals.to_vec()).unwrap();
        let roi = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let (out, arg) = roi_pool(&map, &roi, 1, 2).unwrap();
        // quadrants: {3,1,4,0} {9,2,5,7} {6,15,11,12} {8,10,13,14}
        assert_eq!(out.data(), &[4.0, 9.0, 15.0, 14.0]);
        assert_eq!(arg, vec![4, 2, 9, 15]);
        let (global, _) = roi_pool(&map, &roi, 1, 1).unwrap();
        assert_eq!(global.data(), &[15.0]);
    }

    #[test]
    fn tiny_roi_replicates_one_cell() {
        let map = Tensor::from_fn(&[1, 2, 8, 8], |i| i as f64);
        let roi = BBox::new(20.0, 36.0, 30.0, 46.0).unwrap();
        let (out, arg) = roi_pool(&map, &roi, 16, 7).unwrap();
        assert_eq!(out.shape(), &[2, 7, 7]);
        let cell = map.idx4(0, 0, 2, 1);
        assert!(arg[..49].iter().all(|&a| a == cell));
        assert!(out.data()[..49].iter().all(|&v| v == cell as f64));
    }
}
