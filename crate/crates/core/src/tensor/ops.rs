//! Forward and backward kernels on plain tensors. The tape in `tape.rs` wraps
//! these; they are also usable directly for inference and for tests.

use super::{Shape4, Tensor4};
use crate::error::{config_err, dim_err, Result};
use rayon::prelude::*;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Stride, padding, dilation and grouping of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvGeometry {
    /// Stride 1 with padding that preserves the spatial size for odd kernels.
    pub fn same(kernel: (usize, usize), dilation: (usize, usize), groups: usize) -> Self {
        Self {
            stride: (1, 1),
            padding: (dilation.0 * (kernel.0 - 1) / 2, dilation.1 * (kernel.1 - 1) / 2),
            dilation,
            groups,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let span_h = self.dilation.0 * (kh - 1) + 1;
        let span_w = self.dilation.1 * (kw - 1) + 1;
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < span_h || pw < span_w {
            return dim_err(format!(
                "kernel span {span_h}x{span_w} exceeds padded input {ph}x{pw}"
            ));
        }
        Ok((
            (ph - span_h) / self.stride.0 + 1,
            (pw - span_w) / self.stride.1 + 1,
        ))
    }

    fn validate(&self, x: Shape4, w: Shape4) -> Result<Shape4> {
        if self.groups == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return config_err("groups and strides must be positive");
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return config_err("dilation must be positive");
        }
        if x.c % self.groups != 0 || w.n % self.groups != 0 {
            return config_err(format!(
                "groups={} must divide input channels {} and output channels {}",
                self.groups, x.c, w.n
            ));
        }
        if w.c * self.groups != x.c {
            return dim_err(format!(
                "weight expects {} input channels per group, input has {} channels over {} groups",
                w.c, x.c, self.groups
            ));
        }
        let (oh, ow) = self.output_hw(x.h, x.w, w.h, w.w)?;
        Ok(Shape4::new(x.n, w.n, oh, ow))
    }
}

/// Weights of one convolution layer: weight is `(c_out, c_in / groups, k_h, k_w)`.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: Tensor4,
    pub bias: Option<Vec<f64>>,
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl ConvParams {
    pub fn geometry(&self, padding: (usize, usize)) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            padding,
            dilation: self.dilation,
            groups: self.groups,
        }
    }
}

/// Grouped, dilated cross-correlation plus bias.
pub fn conv2d(x: &Tensor4, p: &ConvParams, padding: (usize, usize)) -> Result<Tensor4> {
    conv2d_forward(x, &p.weight, p.bias.as_deref(), &p.geometry(padding))
}

/// Output index range `[lo, hi)` whose input index `o * stride + offset` lies in `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let room = in_len as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let hi = hi.min(out_len as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor4,
    weight: &Tensor4,
    bias: Option<&[f64]>,
    geom: &ConvGeometry,
) -> Result<Tensor4> {
    let xs = x.shape();
    let ws = weight.shape();
    let os = geom.validate(xs, ws)?;
    if let Some(b) = bias {
        if b.len() != ws.n {
            return dim_err(format!("bias length {} != output channels {}", b.len(), ws.n));
        }
    }
    let oc_per_group = ws.n / geom.groups;
    let ic_per_group = ws.c;
    let (sh, sw) = geom.stride;
    let (dh, dw) = geom.dilation;
    let (ph, pw) = geom.padding;
    let mut out = vec![0.0; os.numel()];
    let xd = x.data();
    let wd = weight.data();
    let in_plane = xs.plane();

    out.par_chunks_mut(os.plane()).enumerate().for_each(|(p, plane)| {
        let n = p / os.c;
        let oc = p % os.c;
        let g = oc / oc_per_group;
        if let Some(b) = bias {
            plane.fill(b[oc]);
        }
        for icl in 0..ic_per_group {
            let ic = g * ic_per_group + icl;
            let src = &xd[(n * xs.c + ic) * in_plane..][..in_plane];
            for kh in 0..ws.h {
                let off_h = (kh * dh) as isize - ph as isize;
                let (oh_lo, oh_hi) = valid_range(os.h, xs.h, sh, off_h);
                for kw in 0..ws.w {
                    let wv = wd[((oc * ic_per_group + icl) * ws.h + kh) * ws.w + kw];
                    let off_w = (kw * dw) as isize - pw as isize;
                    let (ow_lo, ow_hi) = valid_range(os.w, xs.w, sw, off_w);
                    if ow_hi == ow_lo {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * sh) as isize + off_h;
                        let row = &src[ih as usize * xs.w..][..xs.w];
                        let orow = &mut plane[oh * os.w..][..os.w];
                        let iw0 = ((ow_lo * sw) as isize + off_w) as usize;
                        if sw == 1 {
                            let len = ow_hi - ow_lo;
                            for (o, &v) in orow[ow_lo..ow_hi].iter_mut().zip(&row[iw0..iw0 + len]) {
                                *o += wv * v;
                            }
                        } else {
                            for (k, o) in orow[ow_lo..ow_hi].iter_mut().enumerate() {
                                *o += wv * row[iw0 + k * sw];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor4::from_vec(os, out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub(crate) struct ConvGrads {
    pub input: Option<Tensor4>,
    pub weight: Option<Tensor4>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor4,
    weight: &Tensor4,
    gout: &Tensor4,
    geom: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads {
    let xs = x.shape();
    let ws = weight.shape();
    let os = gout.shape();
    let oc_per_group = ws.n / geom.groups;
    let ic_per_group = ws.c;
    let (sh, sw) = geom.stride;
    let (dh, dw) = geom.dilation;
    let (ph, pw) = geom.padding;
    let xd = x.data();
    let wd = weight.data();
    let gd = gout.data();
    let in_plane = xs.plane();
    let out_plane = os.plane();

    let input = need.0.then(|| {
        let mut gin = vec![0.0; xs.numel()];
        gin.par_chunks_mut(in_plane).enumerate().for_each(|(p, plane)| {
            let n = p / xs.c;
            let ic = p % xs.c;
            let g = ic / ic_per_group;
            let icl = ic % ic_per_group;
            for ocl in 0..oc_per_group {
                let oc = g * oc_per_group + ocl;
                let gsrc = &gd[(n * os.c + oc) * out_plane..][..out_plane];
                for kh in 0..ws.h {
                    let off_h = (kh * dh) as isize - ph as isize;
                    let (oh_lo, oh_hi) = valid_range(os.h, xs.h, sh, off_h);
                    for kw in 0..ws.w {
                        let wv = wd[((oc * ic_per_group + icl) * ws.h + kh) * ws.w + kw];
                        let off_w = (kw * dw) as isize - pw as isize;
                        let (ow_lo, ow_hi) = valid_range(os.w, xs.w, sw, off_w);
                        if ow_hi == ow_lo {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * sh) as isize + off_h) as usize;
                            let grow = &gsrc[oh * os.w..][..os.w];
                            let irow = &mut plane[ih * xs.w..][..xs.w];
                            let iw0 = ((ow_lo * sw) as isize + off_w) as usize;
                            if sw == 1 {
                                let len = ow_hi - ow_lo;
                                for (i, &gv) in irow[iw0..iw0 + len].iter_mut().zip(&grow[ow_lo..ow_hi]) {
                                    *i += wv * gv;
                                }
                            } else {
                                for (k, &gv) in grow[ow_lo..ow_hi].iter().enumerate() {
                                    irow[iw0 + k * sw] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
        Tensor4::from_vec(xs, gin).expect("input gradient shape")
    });

    let weight_grad = need.1.then(|| {
        let per_oc = ic_per_group * ws.h * ws.w;
        let mut gw = vec![0.0; ws.numel()];
        gw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, chunk)| {
            let g = oc / oc_per_group;
            for icl in 0..ic_per_group {
                let ic = g * ic_per_group + icl;
                for kh in 0..ws.h {
                    let off_h = (kh * dh) as isize - ph as isize;
                    let (oh_lo, oh_hi) = valid_range(os.h, xs.h, sh, off_h);
                    for kw in 0..ws.w {
                        let off_w = (kw * dw) as isize - pw as isize;
                        let (ow_lo, ow_hi) = valid_range(os.w, xs.w, sw, off_w);
                        let mut acc = 0.0;
                        if ow_hi > ow_lo {
                            for n in 0..xs.n {
                                let src = &xd[(n * xs.c + ic) * in_plane..][..in_plane];
                                let gsrc = &gd[(n * os.c + oc) * out_plane..][..out_plane];
                                for oh in oh_lo..oh_hi {
                                    let ih = ((oh * sh) as isize + off_h) as usize;
                                    let grow = &gsrc[oh * os.w..][..os.w];
                                    let irow = &src[ih * xs.w..][..xs.w];
                                    let iw0 = ((ow_lo * sw) as isize + off_w) as usize;
                                    if sw == 1 {
                                        let len = ow_hi - ow_lo;
                                        acc += grow[ow_lo..ow_hi]
                                            .iter()
                                            .zip(&irow[iw0..iw0 + len])
                                            .map(|(a, b)| a * b)
                                            .sum::<f64>();
                                    } else {
                                        for (k, &gv) in grow[ow_lo..ow_hi].iter().enumerate() {
                                            acc += gv * irow[iw0 + k * sw];
                                        }
                                    }
                                }
                            }
                        }
                        chunk[(icl * ws.h + kh) * ws.w + kw] = acc;
                    }
                }
            }
        });
        Tensor4::from_vec(ws, gw).expect("weight gradient shape")
    });

    let bias = need.2.then(|| {
        (0..os.c)
            .map(|oc| (0..os.n).map(|n| gout.plane(n, oc).iter().sum::<f64>()).sum())
            .collect()
    });

    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

/// Affine batch-normalization state for `c` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl NormParams {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    fn check(&self, c: usize) -> Result<()> {
        let lens = [
            self.gamma.len(),
            self.beta.len(),
            self.running_mean.len(),
            self.running_var.len(),
        ];
        if lens.iter().any(|&l| l != c) {
            return dim_err(format!("norm parameters {lens:?} do not match {c} channels"));
        }
        Ok(())
    }
}

/// Per-channel statistics of one training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

impl BatchStats {
    /// Moves running statistics toward this batch; running variance uses the
    /// unbiased estimate.
    pub fn update_running(&self, mean: &mut [f64], var: &mut [f64], momentum: f64) {
        let bessel = if self.count > 1 {
            self.count as f64 / (self.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..mean.len() {
            mean[c] = (1.0 - momentum) * mean[c] + momentum * self.mean[c];
            var[c] = (1.0 - momentum) * var[c] + momentum * self.var[c] * bessel;
        }
    }
}

/// Normalizes with batch statistics (training) or running statistics
/// (inference). Training mode updates the running statistics in `p`.
pub fn batch_norm(x: &Tensor4, p: &mut NormParams, training: bool) -> Result<Tensor4> {
    p.check(x.shape().c)?;
    if training {
        let (y, stats) = bn_train_forward(x, &p.gamma, &p.beta, p.epsilon)?;
        stats.update_running(&mut p.running_mean, &mut p.running_var, p.momentum);
        Ok(y)
    } else {
        bn_eval_forward(x, &p.gamma, &p.beta, &p.running_mean, &p.running_var, p.epsilon)
    }
}

fn check_channel_vec(name: &str, v: &[f64], c: usize) -> Result<()> {
    if v.len() != c {
        return dim_err(format!("{name} has length {}, expected {c}", v.len()));
    }
    Ok(())
}

pub(crate) fn bn_train_forward(
    x: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor4, BatchStats)> {
    let s = x.shape();
    check_channel_vec("gamma", gamma, s.c)?;
    check_channel_vec("beta", beta, s.c)?;
    let count = s.n * s.plane();
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut acc = 0.0;
        for n in 0..s.n {
            acc += x.plane(n, c).iter().sum::<f64>();
        }
        let m = acc / count as f64;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            out.extend(x.plane(n, c).iter().map(|v| g * ((v - m) * is) + b));
        }
    }
    Ok((
        Tensor4::from_vec(s, out)?,
        BatchStats {
            mean,
            var,
            inv_std,
            count,
        },
    ))
}

/// Returns (grad_input, grad_gamma, grad_beta) for training-mode normalization.
pub(crate) fn bn_train_backward(
    x: &Tensor4,
    gamma: &[f64],
    stats: &BatchStats,
    gy: &Tensor4,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let m = stats.count as f64;
    let mut ggamma = vec![0.0; s.c];
    let mut gbeta = vec![0.0; s.c];
    for c in 0..s.c {
        let (mu, is) = (stats.mean[c], stats.inv_std[c]);
        for n in 0..s.n {
            for (&v, &g) in x.plane(n, c).iter().zip(gy.plane(n, c)) {
                gbeta[c] += g;
                ggamma[c] += g * (v - mu) * is;
            }
        }
    }
    let mut gx = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, is) = (stats.mean[c], stats.inv_std[c]);
            let k = gamma[c] * is / m;
            gx.extend(
                x.plane(n, c)
                    .iter()
                    .zip(gy.plane(n, c))
                    .map(|(&v, &g)| k * (m * g - gbeta[c] - (v - mu) * is * ggamma[c])),
            );
        }
    }
    (Tensor4::from_vec(s, gx).expect("bn grad shape"), ggamma, gbeta)
}

pub(crate) fn bn_eval_forward(
    x: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor4> {
    let s = x.shape();
    for (name, v) in [("gamma", gamma), ("beta", beta), ("running_mean", mean), ("running_var", var)] {
        check_channel_vec(name, v, s.c)?;
    }
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let is = 1.0 / (var[c] + eps).sqrt();
            let (m, g, b) = (mean[c], gamma[c], beta[c]);
            out.extend(x.plane(n, c).iter().map(|v| g * ((v - m) * is) + b));
        }
    }
    Tensor4::from_vec(s, out)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

pub(crate) fn relu_backward(y: &Tensor4, gy: &Tensor4) -> Tensor4 {
    y.zip_map(gy, |o, g| if o > 0.0 { g } else { 0.0 })
        .expect("relu grad shape")
}

/// 2x2 max pooling with stride 2; a trailing odd row or column pools over
/// the elements that exist.
pub fn max_pool2d(x: &Tensor4) -> Result<Tensor4> {
    Ok(max_pool2d_with_argmax(x)?.0)
}

pub(crate) fn max_pool2d_with_argmax(x: &Tensor4) -> Result<(Tensor4, Vec<u32>)> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return dim_err(format!("max pooling needs at least 2x2 input, got {}x{}", s.h, s.w));
    }
    let (oh, ow) = (s.h.div_ceil(2), s.w.div_ceil(2));
    let os = Shape4::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (h, w) = (2 * i + di, 2 * j + dj);
                            if h < s.h && w < s.w {
                                let v = plane[h * s.w + w];
                                if v > best {
                                    best = v;
                                    best_idx = h * s.w + w;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx as u32);
                }
            }
        }
    }
    Ok((Tensor4::from_vec(os, out)?, arg))
}

pub(crate) fn max_pool2d_backward(in_shape: Shape4, argmax: &[u32], gy: &Tensor4) -> Tensor4 {
    let mut gx = Tensor4::zeros(in_shape);
    let out_plane = gy.shape().plane();
    let in_plane = in_shape.plane();
    let data = gx.data_mut();
    for (p, chunk) in gy.data().chunks(out_plane).enumerate() {
        let base = p * in_plane;
        for (k, &g) in chunk.iter().enumerate() {
            data[base + argmax[p * out_plane + k] as usize] += g;
        }
    }
    gx
}

/// Source taps and weights of align-corners-false linear resampling along one axis.
fn linear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|d| {
            let src = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor with align-corners-false sampling.
pub fn upsample_bilinear(x: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor == 0 {
        return config_err("upsampling factor must be at least 1");
    }
    let s = x.shape();
    let os = Shape4::new(s.n, s.c, s.h * factor, s.w * factor);
    let rows = linear_taps(s.h, factor);
    let cols = linear_taps(s.w, factor);
    let mut out = Vec::with_capacity(os.numel());
    let mut tmp = vec![0.0; s.w];
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for &(r0, r1, lr) in &rows {
                let a = &plane[r0 * s.w..][..s.w];
                let b = &plane[r1 * s.w..][..s.w];
                for (t, (&va, &vb)) in tmp.iter_mut().zip(a.iter().zip(b)) {
                    *t = (1.0 - lr) * va + lr * vb;
                }
                out.extend(cols.iter().map(|&(c0, c1, lc)| (1.0 - lc) * tmp[c0] + lc * tmp[c1]));
            }
        }
    }
    Tensor4::from_vec(os, out)
}

pub(crate) fn upsample_bilinear_backward(in_shape: Shape4, factor: usize, gy: &Tensor4) -> Tensor4 {
    let s = in_shape;
    let os = gy.shape();
    let rows = linear_taps(s.h, factor);
    let cols = linear_taps(s.w, factor);
    let mut gx = Tensor4::zeros(s);
    let mut tmp = vec![0.0; s.w];
    let in_plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let gplane = gy.plane(n, c);
            let base = (n * s.c + c) * in_plane;
            for (oh, &(r0, r1, lr)) in rows.iter().enumerate() {
                tmp.fill(0.0);
                for (ow, &(c0, c1, lc)) in cols.iter().enumerate() {
                    let g = gplane[oh * os.w + ow];
                    tmp[c0] += (1.0 - lc) * g;
                    tmp[c1] += lc * g;
                }
                let data = gx.data_mut();
                for (w, &t) in tmp.iter().enumerate() {
                    data[base + r0 * s.w + w] += (1.0 - lr) * t;
                    data[base + r1 * s.w + w] += lr * t;
                }
            }
        }
    }
    gx
}

/// Channels `[start, end)` of every sample.
pub(crate) fn channel_slice(x: &Tensor4, start: usize, end: usize) -> Result<Tensor4> {
    let s = x.shape();
    if start >= end || end > s.c {
        return dim_err(format!("channel range {start}..{end} invalid for {} channels", s.c));
    }
    let os = s.with_c(end - start);
    let p = s.plane();
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        out.extend_from_slice(&x.sample(n)[start * p..end * p]);
    }
    Tensor4::from_vec(os, out)
}

/// Splits the channel axis into equal halves.
pub fn channel_split(x: &Tensor4) -> Result<(Tensor4, Tensor4)> {
    let c = x.shape().c;
    if c % 2 != 0 || c == 0 {
        return config_err(format!("channel split needs an even channel count, got {c}"));
    }
    Ok((channel_slice(x, 0, c / 2)?, channel_slice(x, c / 2, c)?))
}

/// Concatenates along the channel axis.
pub fn channel_concat(parts: &[&Tensor4]) -> Result<Tensor4> {
    let first = match parts.first() {
        Some(t) => t.shape(),
        None => return config_err("cannot concatenate zero tensors"),
    };
    for t in parts {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return dim_err(format!("cannot concatenate {s} with {first}"));
        }
    }
    let c: usize = parts.iter().map(|t| t.shape().c).sum();
    let os = first.with_c(c);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..first.n {
        for t in parts {
            out.extend_from_slice(t.sample(n));
        }
    }
    Tensor4::from_vec(os, out)
}

/// Source channel of each output channel: reshape `(groups, c / groups)`,
/// transpose, flatten.
pub(crate) fn shuffle_permutation(c: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || c % groups != 0 {
        return config_err(format!("channel count {c} is not divisible by {groups} groups"));
    }
    let per = c / groups;
    Ok((0..c).map(|i| (i % groups) * per + i / groups).collect())
}

pub(crate) fn permute_channels(x: &Tensor4, src_of: &[usize]) -> Tensor4 {
    let s = x.shape();
    let p = s.plane();
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        let sample = x.sample(n);
        for &src in src_of {
            out.extend_from_slice(&sample[src * p..(src + 1) * p]);
        }
    }
    Tensor4::from_vec(s, out).expect("permutation preserves shape")
}

pub fn channel_shuffle(x: &Tensor4, groups: usize) -> Result<Tensor4> {
    let perm = shuffle_permutation(x.shape().c, groups)?;
    Ok(permute_channels(x, &perm))
}
