//! Forward and backward kernels for the operator set the architecture uses.
//!
//! All kernels are pure functions over [`Tensor`]s. Work is split across
//! output planes; each plane is accumulated in a fixed order, so results are
//! bit-identical regardless of the rayon thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

const PAR_THRESHOLD: usize = 1 << 15;

/// Convolution hyper-parameters. Kernels are square and odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Dense convolution with "same" padding (`kernel / 2`), stride 1, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..ConvSpec::new(channels, channels, kernel)
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel,
            self.kernel,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "conv kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::config(format!(
                "conv stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.groups == 0
            || !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::config(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Output spatial size for an input of `h x w`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |len: usize, name: &'static str| {
            let padded = len + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    dim: name,
                    expected: self.kernel,
                    got: padded,
                });
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((dim(h, "height")?, dim(w, "width")?))
    }

    /// Learnable parameter count, `(in/groups)*out*k^2 (+out)`.
    pub fn param_count(&self) -> usize {
        let w = self.in_channels / self.groups * self.out_channels * self.kernel * self.kernel;
        w + if self.has_bias { self.out_channels } else { 0 }
    }
}

/// Inference-mode batch norm statistics and affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::of(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, len) in [
            ("beta", self.beta.len()),
            ("running_mean", self.running_mean.len()),
            ("running_var", self.running_var.len()),
        ] {
            if len != c {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    dim: name,
                    expected: c,
                    got: len,
                });
            }
        }
        if self.running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::config("batchnorm running_var must be non-negative"));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that `y = scale * x + shift`.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

fn for_each_plane<T: Scalar>(out: &mut [T], plane: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if plane == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

/// Range of output columns `[lo, hi)` whose tap `k` lands inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn check_conv(x: Shape, w: Shape, bias_len: Option<usize>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    if x.c() != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            dim: "input channels",
            expected: spec.in_channels,
            got: x.c(),
        });
    }
    let ws = spec.weight_shape();
    for (i, name) in ["weight out", "weight in/groups", "weight kh", "weight kw"]
        .into_iter()
        .enumerate()
    {
        if w.0[i] != ws.0[i] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: name,
                expected: ws.0[i],
                got: w.0[i],
            });
        }
    }
    if let Some(len) = bias_len {
        if len != spec.out_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "bias",
                expected: spec.out_channels,
                got: len,
            });
        }
    }
    Ok(())
}

/// Grouped 2-D convolution. `w` is `(out, in/groups, k, k)`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>, spec: &ConvSpec) -> Result<Tensor<T>> {
    check_conv(x.shape(), w.shape(), bias.map(<[T]>::len), spec)?;
    let xs = x.shape();
    let (ho, wo) = spec.output_hw(xs.h(), xs.w())?;
    let out_shape = Shape::new(xs.n(), spec.out_channels, ho, wo);
    let mut out = vec![T::zero(); out_shape.numel()];
    let k = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    let ipg = spec.in_channels / spec.groups;
    let opg = spec.out_channels / spec.groups;
    let (h, wd) = (xs.h(), xs.w());
    let xd = x.data();
    let wdata = w.data();
    let work = out_shape.numel() * ipg * k * k;

    for_each_plane(&mut out, ho * wo, work, |idx, plane| {
        let n = idx / spec.out_channels;
        let oc = idx % spec.out_channels;
        let g = oc / opg;
        if let Some(b) = bias {
            plane.fill(b[oc]);
        }
        for icg in 0..ipg {
            let ic = g * ipg + icg;
            let xoff = (n * spec.in_channels + ic) * h * wd;
            let xp = &xd[xoff..xoff + h * wd];
            let woff = (oc * ipg + icg) * k * k;
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ho, h, ky, p, s);
                for kx in 0..k {
                    let wv = wdata[woff + ky * k + kx];
                    let (ox0, ox1) = valid_range(wo, wd, kx, p, s);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let orow = &mut plane[oy * wo + ox0..oy * wo + ox1];
                        let ix0 = ox0 * s + kx - p;
                        if s == 1 {
                            let irow = &xp[iy * wd + ix0..iy * wd + ix0 + orow.len()];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        } else {
                            let irow = &xp[iy * wd..(iy + 1) * wd];
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += wv * irow[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(out_shape, out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(dy: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec, x_shape: Shape) -> Tensor<T> {
    let ds = dy.shape();
    let (ho, wo) = (ds.h(), ds.w());
    let (h, wd) = (x_shape.h(), x_shape.w());
    let k = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    let ipg = spec.in_channels / spec.groups;
    let opg = spec.out_channels / spec.groups;
    let mut dx = vec![T::zero(); x_shape.numel()];
    let dyd = dy.data();
    let wdata = w.data();
    let work = ds.numel() * ipg * k * k;

    for_each_plane(&mut dx, h * wd, work, |idx, plane| {
        let n = idx / spec.in_channels;
        let ic = idx % spec.in_channels;
        let g = ic / ipg;
        let icg = ic % ipg;
        for oc in g * opg..(g + 1) * opg {
            let doff = (n * spec.out_channels + oc) * ho * wo;
            let dp = &dyd[doff..doff + ho * wo];
            let woff = (oc * ipg + icg) * k * k;
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ho, h, ky, p, s);
                for kx in 0..k {
                    let wv = wdata[woff + ky * k + kx];
                    let (ox0, ox1) = valid_range(wo, wd, kx, p, s);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let drow = &dp[oy * wo + ox0..oy * wo + ox1];
                        let ix0 = ox0 * s + kx - p;
                        if s == 1 {
                            let irow = &mut plane[iy * wd + ix0..iy * wd + ix0 + drow.len()];
                            for (i, &d) in irow.iter_mut().zip(drow) {
                                *i += wv * d;
                            }
                        } else {
                            for (j, &d) in drow.iter().enumerate() {
                                plane[iy * wd + ix0 + j * s] += wv * d;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(x_shape, dx).expect("conv2d_backward_input shape")
}

/// Gradient of `conv2d` with respect to its weight.
pub fn conv2d_backward_weight<T: Scalar>(dy: &Tensor<T>, x: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
    let ds = dy.shape();
    let xs = x.shape();
    let (ho, wo) = (ds.h(), ds.w());
    let (h, wd) = (xs.h(), xs.w());
    let k = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    let ipg = spec.in_channels / spec.groups;
    let opg = spec.out_channels / spec.groups;
    let wshape = spec.weight_shape();
    let mut dw = vec![T::zero(); wshape.numel()];
    let dyd = dy.data();
    let xd = x.data();
    let work = ds.numel() * ipg * k * k;

    for_each_plane(&mut dw, ipg * k * k, work, |oc, chunk| {
        let g = oc / opg;
        for n in 0..xs.n() {
            let doff = (n * spec.out_channels + oc) * ho * wo;
            let dp = &dyd[doff..doff + ho * wo];
            for icg in 0..ipg {
                let ic = g * ipg + icg;
                let xoff = (n * spec.in_channels + ic) * h * wd;
                let xp = &xd[xoff..xoff + h * wd];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ho, h, ky, p, s);
                    for kx in 0..k {
                        let (ox0, ox1) = valid_range(wo, wd, kx, p, s);
                        let mut acc = T::zero();
                        if ox0 < ox1 {
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - p;
                                let drow = &dp[oy * wo + ox0..oy * wo + ox1];
                                let ix0 = ox0 * s + kx - p;
                                if s == 1 {
                                    let irow = &xp[iy * wd + ix0..iy * wd + ix0 + drow.len()];
                                    for (&d, &i) in drow.iter().zip(irow) {
                                        acc += d * i;
                                    }
                                } else {
                                    for (j, &d) in drow.iter().enumerate() {
                                        acc += d * xp[iy * wd + ix0 + j * s];
                                    }
                                }
                            }
                        }
                        chunk[(icg * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
    Tensor::new(wshape, dw).expect("conv2d_backward_weight shape")
}

/// Sum of `dy` over batch and spatial dims, per channel.
pub fn channel_sums<T: Scalar>(dy: &Tensor<T>) -> Vec<T> {
    let s = dy.shape();
    let mut out = vec![T::zero(); s.c()];
    for n in 0..s.n() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += dy.plane(n, c).iter().copied().sum::<T>();
        }
    }
    out
}

fn check_channels(op: &'static str, x: Shape, c: usize) -> Result<()> {
    if x.c() != c {
        return Err(Error::ShapeMismatch {
            op,
            dim: "channels",
            expected: c,
            got: x.c(),
        });
    }
    Ok(())
}

/// Per-channel affine map `y = scale[c] * x + shift[c]`.
pub fn channel_affine<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>> {
    check_channels("channel_affine", x.shape(), scale.len())?;
    let s = x.shape();
    let mut out = x.clone();
    let plane = s.plane();
    for (i, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let c = i % s.c();
        for v in chunk {
            *v = scale[c] * *v + shift[c];
        }
    }
    Ok(out)
}

/// `y[c] = gamma[c] * (x[c] - mean[c]) / sqrt(var[c] + eps) + beta[c]`.
pub fn batchnorm_infer<T: Scalar>(x: &Tensor<T>, bn: &BatchNormParams<T>) -> Result<Tensor<T>> {
    bn.validate()?;
    check_channels("batchnorm", x.shape(), bn.channels())?;
    let s = x.shape();
    let mut out = x.clone();
    let plane = s.plane();
    for (i, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let c = i % s.c();
        let inv = (bn.running_var[c] + bn.eps).sqrt();
        for v in chunk {
            *v = bn.gamma[c] * (*v - bn.running_mean[c]) / inv + bn.beta[c];
        }
    }
    Ok(out)
}

/// Batch statistics of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (used for normalisation).
    pub var: Vec<T>,
    /// Number of elements per channel.
    pub count: usize,
}

/// Mean and biased variance over batch and spatial dims.
pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> BatchStats<T> {
    let s = x.shape();
    let count = s.n() * s.plane();
    let m = T::of(count as f64);
    let mut mean = vec![T::zero(); s.c()];
    let mut var = vec![T::zero(); s.c()];
    for c in 0..s.c() {
        let mut acc = T::zero();
        for n in 0..s.n() {
            acc += x.plane(n, c).iter().copied().sum::<T>();
        }
        let mu = acc / m;
        let mut sq = T::zero();
        for n in 0..s.n() {
            for &v in x.plane(n, c) {
                sq += (v - mu) * (v - mu);
            }
        }
        mean[c] = mu;
        var[c] = sq / m;
    }
    BatchStats { mean, var, count }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `x * sigmoid(x)`, element-wise.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// Derivative of silu at `v`.
#[inline]
pub fn silu_grad<T: Scalar>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

/// Nearest-neighbour upsampling by 2 in both spatial dims.
pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let out_shape = Shape::new(s.n(), s.c(), 2 * h, 2 * w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks(s.plane().max(1)) {
        if s.plane() == 0 {
            break;
        }
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    Tensor::new(out_shape, out).expect("upsample shape")
}

/// Adjoint of [`upsample_nearest2x`]: sums each 2x2 block.
pub fn upsample_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let (h, w) = (s.h() / 2, s.w() / 2);
    Tensor::from_fn([s.n(), s.c(), h, w], |[n, c, y, x]| {
        dy.at([n, c, 2 * y, 2 * x])
            + dy.at([n, c, 2 * y, 2 * x + 1])
            + dy.at([n, c, 2 * y + 1, 2 * x])
            + dy.at([n, c, 2 * y + 1, 2 * x + 1])
    })
}

/// Average of each non-overlapping 2x2 block (stride-2 average pooling).
pub fn avg_pool2x2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let quarter = T::of(0.25);
    upsample_backward(x).map(|v| v * quarter)
}

/// Concatenate along channels. All inputs must share batch and spatial dims.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::config("concat_channels needs at least one tensor"))?
        .shape();
    for t in xs {
        let s = t.shape();
        for (i, dim) in [(0, "batch"), (2, "height"), (3, "width")] {
            if s.0[i] != first.0[i] {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    dim,
                    expected: first.0[i],
                    got: s.0[i],
                });
            }
        }
    }
    let c: usize = xs.iter().map(|t| t.shape().c()).sum();
    let out_shape = Shape::new(first.n(), c, first.h(), first.w());
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n() {
        for t in xs {
            let per = t.shape().c() * t.shape().plane();
            out.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::new(out_shape, out)
}

/// Channels `[start, start + len)` of `x`.
pub fn narrow_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.c() {
        return Err(Error::config(format!(
            "channel range {start}..{} exceeds {} channels",
            start + len,
            s.c()
        )));
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n() * len * plane);
    for n in 0..s.n() {
        let base = (n * s.c() + start) * plane;
        out.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Tensor::new([s.n(), len, s.h(), s.w()], out)
}

/// Split along channels into consecutive groups of the given sizes.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    check_split(x.shape(), sizes)?;
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let t = narrow_channels(x, start, len);
            start += len;
            t
        })
        .collect()
}

pub(crate) fn check_split(x: Shape, sizes: &[usize]) -> Result<()> {
    let total: usize = sizes.iter().sum();
    if sizes.is_empty() || sizes.contains(&0) || total != x.c() {
        return Err(Error::config(format!(
            "split sizes {sizes:?} must be positive and sum to {} channels",
            x.c()
        )));
    }
    Ok(())
}

/// Mean over spatial dims, `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / T::of(s.plane() as f64);
    let data = x
        .data()
        .chunks(s.plane().max(1))
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new([s.n(), s.c(), 1, 1], data).expect("gap shape")
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        let (i, dim) = first_diff(a.shape(), b.shape());
        return Err(Error::ShapeMismatch {
            op: "add",
            dim,
            expected: a.shape().0[i],
            got: b.shape().0[i],
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

fn first_diff(a: Shape, b: Shape) -> (usize, &'static str) {
    const NAMES: [&str; 4] = ["batch", "channels", "height", "width"];
    let i = (0..4).find(|&i| a.0[i] != b.0[i]).unwrap_or(0);
    (i, NAMES[i])
}
