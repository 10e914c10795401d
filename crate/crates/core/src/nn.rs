//! Layer primitives: convolution, batch normalization, global max pooling
//! and the affine map.

use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{gemm_acc, transpose};
use crate::autodiff::{Op, Tape};
use crate::error::{Error, Result};
use crate::exec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel `[C_out, C_in, K_h, K_w]` and per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Scale/shift plus running statistics for eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Weight `[D, K]` and bias `[K]`; computes `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self { eps: 1e-5, momentum: 0.1 }
    }
}

impl<T: Scalar> BatchNormParams<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {input:?}, kernel {kernel:?}: need rank 4")));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", input[1], kernel[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let out = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} larger than padded input {padded}"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let (oh, ow) = (out(input[2], kernel[2])?, out(input[3], kernel[3])?);
        Ok(Self {
            n: input[0],
            cin: input[1],
            h: input[2],
            w: input[3],
            cout: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
            stride,
            padding,
            oh,
            ow,
        })
    }

    /// Output indices `o` in `0..out` whose input coordinate
    /// `o * stride + k - padding` falls inside `0..size`.
    #[inline]
    fn valid(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if size + p > k { ((size + p - k - 1) / s + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Output spatial size of a convolution, or `None` if it would be empty.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold one sample into `[cin*kh*kw, oh*ow]` (or its transpose),
    /// zeros where the window covers padding.
    fn im2col<T: Scalar>(&self, xs: &[T], transposed: bool) -> Vec<T> {
        let (k_all, p_all) = (self.patch(), self.out_plane());
        let mut cols = vec![T::zero(); k_all * p_all];
        for ci in 0..self.cin {
            let xc = &xs[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (ylo, yhi) = self.valid(ky, self.h, self.oh);
                for kx in 0..self.kw {
                    let (xlo, xhi) = self.valid(kx, self.w, self.ow);
                    let k = (ci * self.kh + ky) * self.kw + kx;
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky - self.padding;
                        for ox in xlo..xhi {
                            let ix = ox * self.stride + kx - self.padding;
                            let p = oy * self.ow + ox;
                            let at = if transposed { p * k_all + k } else { k * p_all + p };
                            cols[at] = xc[iy * self.w + ix];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add `[cin*kh*kw, oh*ow]` columns back onto one sample.
    fn col2im<T: Scalar>(&self, cols: &[T], gxs: &mut [T]) {
        let p_all = self.out_plane();
        for ci in 0..self.cin {
            let gxc = &mut gxs[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (ylo, yhi) = self.valid(ky, self.h, self.oh);
                for kx in 0..self.kw {
                    let (xlo, xhi) = self.valid(kx, self.w, self.ow);
                    let k = (ci * self.kh + ky) * self.kw + kx;
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky - self.padding;
                        for ox in xlo..xhi {
                            let ix = ox * self.stride + kx - self.padding;
                            let at = iy * self.w + ix;
                            gxc[at] = gxc[at] + cols[k * p_all + oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an NCHW batch with bias per output channel,
/// evaluated per sample as an unfolded matrix product.
pub fn conv2d<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    params: &ConvParams<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), params.weight.shape(), stride, padding)?;
    if params.bias.shape() != [g.cout] {
        return Err(Error::shape("conv2d", format!("bias {:?} for {} filters", params.bias.shape(), g.cout)));
    }
    let (xd, wd, bd) = (x.data(), params.weight.data(), params.bias.data());
    let in_sample = g.cin * g.h * g.w;
    let out_plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.cout * out_plane];
    exec::for_each_chunk(&mut out, g.cout * out_plane, |n, o| {
        let cols = g.im2col(&xd[n * in_sample..(n + 1) * in_sample], false);
        for (co, plane) in o.chunks_mut(out_plane).enumerate() {
            plane.iter_mut().for_each(|v| *v = bd[co]);
        }
        gemm_acc(wd, &cols, o, g.cout, g.patch(), out_plane);
    });
    let value = Tensor::raw(vec![g.n, g.cout, g.oh, g.ow], out);
    Ok(tape.record(Op::Conv2d(g), &[x, &params.weight, &params.bias], value))
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &[T],
    want: &[bool],
) -> Vec<Option<Vec<T>>> {
    let (xd, wd) = (x.data(), w.data());
    let in_sample = g.cin * g.h * g.w;
    let out_plane = g.out_plane();
    let sample_out = g.cout * out_plane;
    let patch = g.patch();
    let wt = if want[0] { transpose(wd, g.cout, patch) } else { Vec::new() };

    // Per-sample input gradients and weight-gradient contributions; the
    // latter are summed below in sample order.
    let parts = exec::map_indexed(g.n, |n| {
        let gs = &grad[n * sample_out..(n + 1) * sample_out];
        let gx = want[0].then(|| {
            let mut gcols = vec![T::zero(); patch * out_plane];
            gemm_acc(&wt, gs, &mut gcols, patch, g.cout, out_plane);
            let mut gxs = vec![T::zero(); in_sample];
            g.col2im(&gcols, &mut gxs);
            gxs
        });
        let gw = want[1].then(|| {
            let cols_t = g.im2col(&xd[n * in_sample..(n + 1) * in_sample], true);
            let mut gws = vec![T::zero(); g.cout * patch];
            gemm_acc(gs, &cols_t, &mut gws, g.cout, out_plane, patch);
            gws
        });
        (gx, gw)
    });

    let gx = want[0].then(|| parts.iter().flat_map(|(gx, _)| gx.as_deref().unwrap_or_default().iter().copied()).collect());
    let gw = want[1].then(|| {
        let mut acc = vec![T::zero(); wd.len()];
        for (_, gws) in &parts {
            for (a, &v) in acc.iter_mut().zip(gws.as_deref().unwrap_or_default()) {
                *a = *a + v;
            }
        }
        acc
    });
    let gb = want[2].then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, b) in gb.iter_mut().enumerate() {
                let start = n * sample_out + co * out_plane;
                *b = grad[start..start + out_plane].iter().fold(*b, |a, &v| a + v);
            }
        }
        gb
    });

    vec![gx, gw, gb]
}

/// Batch normalization over the N, H, W axes of an NCHW tensor.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running statistics of `params` with the configured momentum (running
/// variance uses the unbiased estimate). Eval mode reads the running
/// statistics only.
pub fn batchnorm<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: BnMode,
    cfg: BnConfig,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape("batchnorm", format!("expected NCHW input, got {:?}", x.shape())));
    }
    let (n, c, plane) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    for (name, t) in [
        ("gamma", &params.gamma),
        ("beta", &params.beta),
        ("running_mean", &params.running_mean),
        ("running_var", &params.running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::shape("batchnorm", format!("{name} {:?} for {c} channels", t.shape())));
        }
    }
    let count = n * plane;
    if mode == BnMode::Train && count < 2 {
        return Err(Error::DegenerateBatch(count));
    }
    let xd = x.data();
    let eps = T::of(cfg.eps);
    let at = |s: usize, ch: usize| &xd[(s * c + ch) * plane..(s * c + ch + 1) * plane];

    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        BnMode::Train => (0..c)
            .map(|ch| {
                let m = T::of(count as f64);
                let mean = (0..n).flat_map(|s| at(s, ch)).fold(T::zero(), |a, &v| a + v) / m;
                let var = (0..n)
                    .flat_map(|s| at(s, ch))
                    .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                    / m;
                (mean, var)
            })
            .unzip(),
        BnMode::Eval => (params.running_mean.data().to_vec(), params.running_var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let (gamma, beta) = (params.gamma.data(), params.beta.data());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gamma[ch] * h + beta[ch];
            }
        }
    }

    if mode == BnMode::Train {
        let mom = T::of(cfg.momentum);
        let keep = T::one() - mom;
        let unbias = T::of(count as f64 / (count as f64 - 1.0));
        let rm: Vec<T> = params.running_mean.data().iter().zip(&mean).map(|(&r, &m)| keep * r + mom * m).collect();
        let rv: Vec<T> = params
            .running_var
            .data()
            .iter()
            .zip(&var)
            .map(|(&r, &v)| keep * r + mom * v * unbias)
            .collect();
        params.running_mean = Tensor::raw(vec![c], rm);
        params.running_var = Tensor::raw(vec![c], rv);
    }

    let value = Tensor::raw(x.shape().to_vec(), out);
    let op = Op::BatchNorm { xhat, inv_std, train: mode == BnMode::Train };
    Ok(tape.record(op, &[x, &params.gamma, &params.beta], value))
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    g: &[T],
) -> Vec<Option<Vec<T>>> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let idx = |s: usize, ch: usize| (s * c + ch) * plane..(s * c + ch + 1) * plane;
    let mut gx = vec![T::zero(); g.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let m = T::of((n * plane) as f64);
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for s in 0..n {
            for i in idx(s, ch) {
                sum_g = sum_g + g[i];
                sum_gx = sum_gx + g[i] * xhat[i];
            }
        }
        gbeta[ch] = sum_g;
        ggamma[ch] = sum_gx;
        let scale = gamma[ch] * inv_std[ch];
        for s in 0..n {
            for i in idx(s, ch) {
                gx[i] = if train {
                    scale * (g[i] - sum_g / m - xhat[i] * sum_gx / m)
                } else {
                    scale * g[i]
                };
            }
        }
    }
    vec![Some(gx), Some(ggamma), Some(gbeta)]
}

/// Per-sample, per-channel spatial maximum: `[N,C,H,W] -> [N,C]`. Ties go to
/// the first position in row-major order.
pub fn global_max_pool<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape("global_max_pool", format!("expected NCHW input, got {:?}", x.shape())));
    }
    let (n, c, plane) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    let mut argmax = Vec::with_capacity(n * c);
    let mut out = Vec::with_capacity(n * c);
    for (p, values) in x.data().chunks(plane).enumerate() {
        let mut best = 0;
        for (i, &v) in values.iter().enumerate().skip(1) {
            if v > values[best] {
                best = i;
            }
        }
        argmax.push(p * plane + best);
        out.push(values[best]);
    }
    let value = Tensor::raw(vec![n, c], out);
    Ok(tape.record(Op::MaxPool { argmax }, &[x], value))
}

pub(crate) fn max_pool_backward<T: Scalar>(input_len: usize, argmax: &[usize], g: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); input_len];
    for (&i, &gv) in argmax.iter().zip(g) {
        gx[i] = gx[i] + gv;
    }
    gx
}

/// `x W + b` for `x: [N, D]`.
pub fn affine<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, params: &AffineParams<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || params.weight.rank() != 2 || x.shape()[1] != params.weight.shape()[0] {
        return Err(Error::shape(
            "affine",
            format!("input {:?} with weight {:?}", x.shape(), params.weight.shape()),
        ));
    }
    let xw = tape.matmul(x, &params.weight)?;
    tape.add_bias(&xw, &params.bias)
}
