//! Reparameterized heterogeneous depthwise convolution (RepHDWConv).
//!
//! During training a RepHDWConv runs one large depthwise kernel and several
//! smaller ones in parallel, each followed by its own batch norm, and sums the
//! branch outputs. Because every branch is linear and shares the output grid,
//! the whole unit collapses to a single large depthwise convolution with bias:
//!
//! 1. fold each branch's BN into its kernel ([`fold_bn`]),
//! 2. zero-pad each small folded kernel to the large size,
//! 3. add the kernels and add the biases ([`RepHDWConv::fuse`]).

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_weight, BatchNorm, Conv};
use crate::ops::{BatchNormParams, ConvSpec};
use crate::tensor::{join, Param, Scalar, Tensor};

/// Small kernel sizes that nest inside `large`: every odd `k` with
/// `3 <= k <= large - 2`, largest first. A 3x3 unit has none.
pub fn default_small_kernels(large: usize) -> Result<Vec<usize>> {
    if large < 3 || large.is_multiple_of(2) {
        return Err(Error::config(format!(
            "RepHDWConv large kernel must be odd and >= 3, got {large}"
        )));
    }
    Ok((3..large).step_by(2).rev().collect())
}

/// Folds inference-mode BN into the preceding bias-free convolution:
/// `w'[o] = w[o] * gamma / sqrt(var + eps)`, `b' = beta - gamma * mean / sqrt(var + eps)`.
pub fn fold_bn<T: Scalar>(w: &Tensor<T>, bn: &BatchNormParams<T>) -> Result<(Tensor<T>, Vec<T>)> {
    bn.validate()?;
    let out = w.shape().n();
    if out != bn.channels() {
        return Err(Error::ShapeMismatch {
            op: "fold_bn",
            dim: "output channels",
            expected: bn.channels(),
            got: out,
        });
    }
    let (scale, shift) = bn.affine();
    let per = w.numel() / out.max(1);
    let mut folded = w.clone();
    for (o, chunk) in folded.data_mut().chunks_mut(per.max(1)).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= scale[o]);
    }
    Ok((folded, shift))
}

/// Zero-pads a `(C, 1, k, k)` kernel symmetrically to `(C, 1, size, size)`.
pub fn pad_kernel<T: Scalar>(w: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let s = w.shape();
    let k = s.h();
    if s.w() != k || k > size || !(size - k).is_multiple_of(2) {
        return Err(Error::config(format!(
            "cannot centre a {k}x{} kernel inside {size}x{size}",
            s.w()
        )));
    }
    let off = (size - k) / 2;
    let mut out = Tensor::zeros([s.n(), s.c(), size, size]);
    for o in 0..s.n() {
        for i in 0..s.c() {
            for y in 0..k {
                for x in 0..k {
                    out.set([o, i, y + off, x + off], w.at([o, i, y, x]));
                }
            }
        }
    }
    Ok(out)
}

/// One depthwise branch: `(C, 1, k, k)` kernel followed by its own BN.
#[derive(Clone, Debug)]
pub struct DwBranch<T: Scalar = f32> {
    pub kernel: usize,
    pub weight: Param<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> DwBranch<T> {
    fn spec(&self, channels: usize) -> ConvSpec {
        ConvSpec::depthwise(channels, self.kernel)
    }
}

#[derive(Clone, Debug)]
pub struct RepHDWConv<T: Scalar = f32> {
    pub channels: usize,
    pub large_kernel: usize,
    pub small_kernels: Vec<usize>,
    /// Large branch first, then the small ones in `small_kernels` order.
    pub branches: Vec<DwBranch<T>>,
    /// Merged `(C, 1, K, K)` kernel and bias, present after [`fuse`](Self::fuse).
    pub fused: Option<Conv<T>>,
    pub training: bool,
}

impl<T: Scalar> RepHDWConv<T> {
    pub fn new(channels: usize, large_kernel: usize, small_kernels: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        validate_kernels(large_kernel, &small_kernels, true)?;
        if channels == 0 {
            return Err(Error::config("RepHDWConv needs at least one channel"));
        }
        // Branch outputs are summed, so each branch gets 1/n of the variance.
        let scale = T::of(1.0 / ((1 + small_kernels.len()) as f64).sqrt());
        let branches = std::iter::once(large_kernel)
            .chain(small_kernels.iter().copied())
            .map(|k| DwBranch {
                kernel: k,
                weight: Param::new(init_weight(&ConvSpec::depthwise(channels, k), rng).map(|v| v * scale)),
                bn: BatchNorm::new(channels),
            })
            .collect();
        Ok(RepHDWConv {
            channels,
            large_kernel,
            small_kernels,
            branches,
            fused: None,
            training: false,
        })
    }

    /// Large kernel with every admissible small kernel.
    pub fn with_default_branches(channels: usize, large_kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(channels, large_kernel, default_small_kernels(large_kernel)?, rng)
    }

    /// Builds a unit from explicit branch weights. The first branch is the
    /// large one; the rest only have to be odd and no larger, so duplicated
    /// sizes are accepted here (useful for superposition tests).
    pub fn from_branches(branches: Vec<(Tensor<T>, BatchNormParams<T>)>) -> Result<Self> {
        let first = branches
            .first()
            .ok_or_else(|| Error::config("RepHDWConv needs at least one branch"))?;
        let channels = first.0.shape().n();
        let large_kernel = first.0.shape().h();
        let mut out = Vec::with_capacity(branches.len());
        for (w, bn) in branches {
            let k = w.shape().h();
            let expect = ConvSpec::depthwise(channels, k).weight_shape();
            if w.shape() != expect {
                return Err(Error::config(format!(
                    "branch weight {} is not a depthwise kernel of shape {expect}",
                    w.shape()
                )));
            }
            if bn.channels() != channels {
                return Err(Error::ShapeMismatch {
                    op: "RepHDWConv",
                    dim: "bn channels",
                    expected: channels,
                    got: bn.channels(),
                });
            }
            out.push(DwBranch {
                kernel: k,
                weight: Param::new(w),
                bn: BatchNorm::from_params(&bn),
            });
        }
        let small_kernels: Vec<usize> = out[1..].iter().map(|b| b.kernel).collect();
        validate_kernels(large_kernel, &small_kernels, false)?;
        Ok(RepHDWConv {
            channels,
            large_kernel,
            small_kernels,
            branches: out,
            fused: None,
            training: false,
        })
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    /// Sum of per-branch `BN(depthwise_conv(x))`, every branch padded to keep
    /// the input's spatial size.
    pub fn forward_train(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut acc: Option<Var> = None;
        for b in &self.branches {
            let w = tape.param(&b.weight);
            let y = tape.conv2d(x, w, None, &b.spec(self.channels))?;
            let y = b.bn.forward(tape, y)?;
            acc = Some(match acc {
                None => y,
                Some(a) => tape.add(a, y)?,
            });
        }
        Ok(acc.expect("at least one branch"))
    }

    /// Single depthwise convolution with the merged kernel and bias.
    pub fn forward_fused(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let conv = self.fused.as_ref().ok_or_else(|| Error::NotFused {
            unit: format!("RepHDWConv {}x{}", self.large_kernel, self.large_kernel),
        })?;
        conv.forward(tape, x)
    }

    /// Dispatches on the tape's `fused` switch.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if tape.mode.fused {
            self.forward_fused(tape, x)
        } else {
            self.forward_train(tape, x)
        }
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let c = tape.shape(x).c();
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "RepHDWConv",
                dim: "channels",
                expected: self.channels,
                got: c,
            });
        }
        Ok(())
    }

    /// Computes the merged kernel and bias without storing them.
    pub fn merged(&self) -> Result<(Tensor<T>, Vec<T>)> {
        let small: Vec<usize> = self.branches[1..].iter().map(|b| b.kernel).collect();
        validate_kernels(self.large_kernel, &small, false)?;
        let mut kernel = Tensor::zeros([self.channels, 1, self.large_kernel, self.large_kernel]);
        let mut bias = vec![T::zero(); self.channels];
        for b in &self.branches {
            let (w, shift) = fold_bn(&b.weight.value, &b.bn.params())?;
            let w = pad_kernel(&w, self.large_kernel)?;
            kernel.data_mut().iter_mut().zip(w.data()).for_each(|(k, &v)| *k += v);
            bias.iter_mut().zip(&shift).for_each(|(a, &s)| *a += s);
        }
        Ok((kernel, bias))
    }

    /// Merges all branches into one depthwise kernel + bias and stores it.
    /// Uses running statistics, so it is refused while training.
    pub fn fuse(&mut self) -> Result<()> {
        if self.training {
            return Err(Error::FuseWhileTraining {
                unit: format!("RepHDWConv {}x{}", self.large_kernel, self.large_kernel),
            });
        }
        let (kernel, bias) = self.merged()?;
        let spec = ConvSpec::depthwise(self.channels, self.large_kernel);
        self.fused = Some(Conv::from_parts(spec, kernel, Some(bias))?);
        Ok(())
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.branches.iter().enumerate() {
            let p = join(prefix, &format!("branch{i}"));
            f(&join(&p, "weight"), &b.weight);
            let bn = join(&p, "bn");
            f(&join(&bn, "gamma"), &b.bn.gamma);
            f(&join(&bn, "beta"), &b.bn.beta);
            f(&join(&bn, "running_mean"), &b.bn.running_mean);
            f(&join(&bn, "running_var"), &b.bn.running_var);
        }
        if let Some(c) = &self.fused {
            f(&join(prefix, "fused.weight"), &c.weight);
            if let Some(b) = &c.bias {
                f(&join(prefix, "fused.bias"), b);
            }
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            let p = join(prefix, &format!("branch{i}"));
            f(&join(&p, "weight"), &mut b.weight);
            let bn = join(&p, "bn");
            f(&join(&bn, "gamma"), &mut b.bn.gamma);
            f(&join(&bn, "beta"), &mut b.bn.beta);
            f(&join(&bn, "running_mean"), &mut b.bn.running_mean);
            f(&join(&bn, "running_var"), &mut b.bn.running_var);
        }
        if let Some(c) = &mut self.fused {
            f(&join(prefix, "fused.weight"), &mut c.weight);
            if let Some(b) = &mut c.bias {
                f(&join(prefix, "fused.bias"), b);
            }
        }
    }

    /// Learnable parameters of the training graph: every branch kernel plus
    /// two BN vectors per branch.
    pub fn train_param_count(&self) -> usize {
        let c = self.channels;
        self.branches.iter().map(|b| c * b.kernel * b.kernel + 2 * c).sum()
    }

    /// Learnable parameters after fusion: `C*K^2 + C`.
    pub fn fused_param_count(&self) -> usize {
        self.channels * self.large_kernel * self.large_kernel + self.channels
    }
}

fn validate_kernels(large: usize, small: &[usize], strict: bool) -> Result<()> {
    if large.is_multiple_of(2) || large == 0 {
        return Err(Error::config(format!("large kernel {large} must be odd")));
    }
    let mut prev = large;
    for &k in small {
        if k % 2 == 0 || k == 0 {
            return Err(Error::config(format!("small kernel {k} must be odd")));
        }
        if k > large || (strict && (k >= prev || k < 3)) {
            return Err(Error::config(format!(
                "small kernels {small:?} must be strictly decreasing odd sizes in [3, {large})"
            )));
        }
        prev = k;
    }
    Ok(())
}
