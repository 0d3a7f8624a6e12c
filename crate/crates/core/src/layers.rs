//! Differentiable layer primitives.
//!
//! Every forward function is pure; the matching `*_backward` function takes
//! the forward inputs plus the upstream gradient and returns exact gradients.
//! Parameter gradients come back as plain buffers so the caller decides where
//! to accumulate them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `c = a · b + beta · c` where `a` is `m×k` (or `k×m` when
/// `trans_a`) and `b` is `k×n` (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the extents described by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution parameters: `weight` is `outC×inC×kH×kW`, `bias` is `outC`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (out_c, _, _, _) = weight.dims4()?;
        if bias.shape() != [out_c] {
            return Err(Error::shape("conv2d", weight.shape(), bias.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Glorot-uniform weights, zero bias, "same" padding for odd kernels.
    pub fn glorot<R: Rng + ?Sized>(in_c: usize, out_c: usize, kernel: usize, rng: &mut R) -> Self {
        let area = kernel * kernel;
        let weight = Tensor::glorot(&[out_c, in_c, kernel, kernel], in_c * area, out_c * area, rng);
        Conv2d {
            weight,
            bias: Tensor::zeros(&[out_c]),
            stride: 1,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < kh || wp < kw {
            return None;
        }
        Some(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == (1, 1) && self.stride == 1 && self.padding == 0
    }

    pub fn accumulate(&mut self, grads: &ConvGrads) {
        self.weight.accumulate_grad(&grads.weight);
        self.bias.accumulate_grad(&grads.bias);
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_geometry(input: &Tensor, p: &Conv2d) -> Result<(usize, ConvGeometry)> {
    let (n, c, h, w) = input.dims4()?;
    let (_, in_c, kh, kw) = p.weight.dims4()?;
    if c != in_c {
        return Err(Error::shape("conv2d", input.shape(), p.weight.shape()));
    }
    let (oh, ow) = p
        .output_hw(h, w)
        .ok_or_else(|| Error::shape("conv2d", input.shape(), p.weight.shape()))?;
    Ok((
        n,
        ConvGeometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride: p.stride,
            pad: p.padding,
        },
    ))
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let pixels = g.pixels();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let pixels = g.pixels();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, `N×C×H×W → N×outC×H'×W'` with
/// `H' = (H + 2·padding − kH) / stride + 1`.
pub fn conv2d(input: &Tensor, p: &Conv2d) -> Result<Tensor> {
    let (n, g) = conv_geometry(input, p)?;
    let out_c = p.out_channels();
    let pixels = g.pixels();
    let rows = g.rows();
    let mut out = Tensor::zeros(&[n, out_c, g.oh, g.ow]);
    let mut cols = if p.is_pointwise() { Vec::new() } else { vec![0.0; rows * pixels] };
    let in_per = g.c * g.h * g.w;
    for b in 0..n {
        let x = &input.data()[b * in_per..(b + 1) * in_per];
        let y = &mut out.data_mut()[b * out_c * pixels..(b + 1) * out_c * pixels];
        for (o, chunk) in y.chunks_mut(pixels).enumerate() {
            chunk.fill(p.bias.data()[o]);
        }
        let src = if p.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        gemm(out_c, rows, pixels, p.weight.data(), false, src, false, 1.0, y);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] given the forward input and `∂L/∂output`.
pub fn conv2d_backward(
    input: &Tensor,
    p: &Conv2d,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let (n, g) = conv_geometry(input, p)?;
    let out_c = p.out_channels();
    if grad_out.shape() != [n, out_c, g.oh, g.ow] {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), &[n, out_c, g.oh, g.ow]));
    }
    let pixels = g.pixels();
    let rows = g.rows();
    let in_per = g.c * g.h * g.w;
    let mut dw = vec![0.0; out_c * rows];
    let mut db = vec![0.0; out_c];
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let pointwise = p.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * pixels] };
    let mut dcols = vec![0.0; if pointwise { 0 } else { rows * pixels }];
    for b in 0..n {
        let x = &input.data()[b * in_per..(b + 1) * in_per];
        let dy = &grad_out.data()[b * out_c * pixels..(b + 1) * out_c * pixels];
        for (o, chunk) in dy.chunks(pixels).enumerate() {
            db[o] += chunk.iter().sum::<f64>();
        }
        let src = if pointwise {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        gemm(out_c, pixels, rows, dy, false, src, true, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[b * in_per..(b + 1) * in_per];
            if pointwise {
                gemm(rows, out_c, pixels, p.weight.data(), true, dy, false, 1.0, dxb);
            } else {
                gemm(rows, out_c, pixels, p.weight.data(), true, dy, false, 0.0, &mut dcols);
                col2im(&dcols, &g, dxb);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Max pooling. Returns the pooled map and, for every output element, the
/// linear index of the winning input element. Ties go to the lowest index.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid("maxpool2d", "window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::invalid(
            "maxpool2d",
            format!("window {window} larger than input {h}×{w}"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let x = input.data();
    let y = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                let mut best_v = x[best];
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for i in row..row + window {
                        if x[i] > best_v {
                            best_v = x[i];
                            best = i;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                y[o] = best_v;
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to its argmax input position.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    assert_eq!(argmax.len(), grad_out.len());
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    assert!(input.same_shape(grad_out));
    let mut dx = grad_out.clone();
    dx.data_mut()
        .iter_mut()
        .zip(input.data())
        .for_each(|(g, &x)| {
            if x <= 0.0 {
                *g = 0.0
            }
        });
    dx
}

/// Fully-connected layer: `weight` is `D×M`, `bias` is `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, m) = weight.dims2()?;
        if bias.shape() != [m] {
            return Err(Error::shape("fully_connected", weight.shape(), bias.shape()));
        }
        Ok(Linear { weight, bias })
    }

    pub fn glorot<R: Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::glorot(&[d, m], d, m, rng),
            bias: Tensor::zeros(&[m]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn accumulate(&mut self, grads: &LinearGrads) {
        self.weight.accumulate_grad(&grads.weight);
        self.bias.accumulate_grad(&grads.bias);
    }
}

/// `N×D → N×M` affine map.
pub fn fully_connected(input: &Tensor, layer: &Linear) -> Result<Tensor> {
    let (n, d) = input.dims2()?;
    let (wd, m) = layer.weight.dims2()?;
    if d != wd {
        return Err(Error::shape("fully_connected", input.shape(), layer.weight.shape()));
    }
    let mut out = Tensor::zeros(&[n, m]);
    for row in out.data_mut().chunks_mut(m) {
        row.copy_from_slice(layer.bias.data());
    }
    gemm(n, d, m, input.data(), false, layer.weight.data(), false, 1.0, out.data_mut());
    Ok(out)
}

pub fn fully_connected_backward(input: &Tensor, layer: &Linear, grad_out: &Tensor) -> Result<LinearGrads> {
    let (n, d) = input.dims2()?;
    let m = layer.out_features();
    if grad_out.shape() != [n, m] {
        return Err(Error::shape("fully_connected_backward", grad_out.shape(), &[n, m]));
    }
    let mut dx = Tensor::zeros(&[n, d]);
    gemm(n, m, d, grad_out.data(), false, layer.weight.data(), true, 0.0, dx.data_mut());
    let mut dw = vec![0.0; d * m];
    gemm(d, n, m, input.data(), true, grad_out.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0; m];
    for row in grad_out.data().chunks(m) {
        db.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }
    Ok(LinearGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Row-wise softmax of an `N×K` logit matrix, stabilized by max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(probs)
}

/// Mean negative log-likelihood of `labels` under the row softmax of `logits`.
/// Returns the loss and the probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, classes: k });
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        // log-sum-exp form keeps saturated logits exact.
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    Ok((loss / n as f64, probs))
}

/// `∂loss/∂logits = (probs − onehot) / N`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Tensor {
    let (n, k) = probs.dims2().expect("probabilities are N×K");
    let mut g = probs.clone();
    for (row, &label) in g.data_mut().chunks_mut(k).zip(labels) {
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    g
}

fn smooth_l1_check(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<()> {
    if !pred.same_shape(target) {
        return Err(Error::shape("smooth_l1", pred.shape(), target.shape()));
    }
    if !pred.same_shape(mask) {
        return Err(Error::shape("smooth_l1", pred.shape(), mask.shape()));
    }
    Ok(())
}

/// `Σ mask · f(pred − target)` with `f(d) = 0.5·d²` for `|d| < 1`, else `|d| − 0.5`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f64> {
    smooth_l1_check(pred, target, mask)?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .zip(mask.data())
        .map(|((p, t), m)| {
            let d = p - t;
            let f = if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            m * f
        })
        .sum())
}

/// Gradient of [`smooth_l1`] with respect to `pred`.
pub fn smooth_l1_backward(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    smooth_l1_check(pred, target, mask)?;
    let mut g = Tensor::zeros(pred.shape());
    for (((g, p), t), m) in g
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
        .zip(mask.data())
    {
        let d = p - t;
        *g = m * if d.abs() < 1.0 { d } else { d.signum() };
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(out_c: usize, in_c: usize, k: usize, stride: usize, padding: usize, fill: f64) -> Conv2d {
        Conv2d::new(
            Tensor::full(&[out_c, in_c, k, k], fill),
            Tensor::zeros(&[out_c]),
            stride,
            padding,
        )
        .unwrap()
    }

    #[test]
    fn same_padding_keeps_spatial_size() {
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| i as f64);
        let y = conv2d(&x, &conv(5, 1, 3, 1, 1, 0.1)).unwrap();
        assert_eq!(y.shape(), &[1, 5, 8, 8]);
    }

    #[test]
    fn conv_output_size_formula() {
        let x = Tensor::zeros(&[2, 3, 9, 7]);
        let y = conv2d(&x, &conv(4, 3, 3, 2, 0, 1.0)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let x = Tensor::from_fn(&[1, 2, 5, 5], |i| (i as f64).sin());
        let y = conv2d(&x, &conv(3, 2, 3, 1, 1, 0.0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = Tensor::from_fn(&[1, 2, 4, 5], |i| ((i * 7) % 11) as f64 - 5.0);
        let mut p = conv(3, 2, 3, 1, 1, 0.0);
        p.weight = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5) % 7) as f64 * 0.1 - 0.3);
        p.bias = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &p).unwrap();
        for o in 0..3 {
            for oy in 0..4 {
                for ox in 0..5 {
                    let mut s = p.bias.data()[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = oy as isize + ki as isize - 1;
                                let ix = ox as isize + kj as isize - 1;
                                if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                    s += p.weight.data()[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * x.data()[x.idx4(0, c, iy as usize, ix as usize)];
                                }
                            }
                        }
                    }
                    assert!((y.data()[y.idx4(0, o, oy, ox)] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let err = conv2d(&x, &conv(2, 2, 3, 1, 1, 0.0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn maxpool_takes_window_max() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_ties_route_to_first_element() {
        let x = Tensor::full(&[1, 1, 4, 4], 2.5);
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let g = maxpool2d_backward(x.shape(), &arg, &Tensor::full(&[1, 1, 2, 2], 1.0));
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[5], 0.0);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        assert!(maxpool2d(&Tensor::zeros(&[1, 1, 2, 2]), 3, 1).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let pos = Tensor::new(&[2], vec![0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0);
        let eye = Linear::new(Tensor::from_fn(&[3, 3], |i| (i % 4 == 0) as u8 as f64), Tensor::zeros(&[3])).unwrap();
        assert_eq!(fully_connected(&x, &eye).unwrap(), x);
        let b = Tensor::new(&[2], vec![1.5, -0.5]).unwrap();
        let zero = Linear::new(Tensor::zeros(&[3, 2]), b.clone()).unwrap();
        let y = fully_connected(&x, &zero).unwrap();
        assert_eq!(y.data(), &[1.5, -0.5, 1.5, -0.5]);
        assert!(fully_connected(&Tensor::zeros(&[2, 4]), &eye).is_err());
    }

    #[test]
    fn softmax_ce_symmetric_and_saturated() {
        let logits = Tensor::zeros(&[1, 2]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert_eq!(probs.data(), &[0.5, 0.5]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

        let logits = Tensor::new(&[1, 3], vec![1000.0, 0.0, 0.0]).unwrap();
        let (loss, probs) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(probs.all_finite());

        assert!(matches!(
            softmax_cross_entropy(&Tensor::zeros(&[1, 2]), &[2]),
            Err(Error::Label { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn smooth_l1_piecewise_values() {
        let t = Tensor::zeros(&[3]);
        let m = Tensor::full(&[3], 1.0);
        let p = Tensor::new(&[3], vec![0.0, 0.5, 2.0]).unwrap();
        assert_eq!(smooth_l1(&p, &t, &m).unwrap(), 0.125 + 1.5);
        let masked = Tensor::new(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        assert_eq!(smooth_l1(&p, &t, &masked).unwrap(), 1.5);
        let g = smooth_l1_backward(&p, &t, &m).unwrap();
        assert_eq!(g.data(), &[0.0, 0.5, 1.0]);
        assert!(smooth_l1(&p, &Tensor::zeros(&[2]), &m).is_err());
    }
}
