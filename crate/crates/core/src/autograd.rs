//! Reverse-mode differentiation over a flat tape.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs. [`Tape::backward`] walks the nodes in reverse, accumulating
//! gradients into every node that requires them, then releases the graph.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams, ConvSpec};
use crate::tensor::{Param, ParamId, Scalar, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for instrumentation and the corrupted-backward hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv2d,
    BatchNorm,
    BatchNormTrain,
    Silu,
    Add,
    Upsample,
    Concat,
    Narrow,
    Sum,
    WeightedSum,
    GlobalAvgPool,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::BatchNormTrain,
        OpKind::Silu,
        OpKind::Add,
        OpKind::Upsample,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Sum,
        OpKind::WeightedSum,
        OpKind::GlobalAvgPool,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batchnorm",
            OpKind::BatchNormTrain => "batchnorm_train",
            OpKind::Silu => "silu",
            OpKind::Add => "add",
            OpKind::Upsample => "upsample",
            OpKind::Concat => "concat",
            OpKind::Narrow => "split",
            OpKind::Sum => "sum",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Forward-pass switches read by the layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ForwardMode {
    /// Use fused (reparameterized) weights instead of the training branches.
    pub fused: bool,
    /// Normalise with batch statistics instead of running statistics.
    pub batch_stats: bool,
    /// Skip activations so block compositions stay linear.
    pub bypass_activations: bool,
    /// Register parameters as constants (no gradient).
    pub freeze_params: bool,
}

/// `MAF_CHECKED=0` disables NaN/Inf checks; anything else (or unset) enables them.
pub fn checked_default() -> bool {
    static CHECKED: OnceLock<bool> = OnceLock::new();
    *CHECKED.get_or_init(|| std::env::var("MAF_CHECKED").map_or(true, |v| v.trim() != "0"))
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    /// Affine normalisation with fixed statistics (`batch == false`) or
    /// batch statistics whose dependence on `x` is differentiated through.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    Silu(Var),
    Add(Var, Var),
    Upsample(Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { batch: false, .. } => OpKind::BatchNorm,
            Op::BatchNorm { batch: true, .. } => OpKind::BatchNormTrain,
            Op::Silu(_) => OpKind::Silu,
            Op::Add(..) => OpKind::Add,
            Op::Upsample(_) => OpKind::Upsample,
            Op::Concat(_) => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Sum(_) => OpKind::Sum,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
    op_counts: HashMap<OpKind, usize>,
    batch_stats: HashMap<ParamId, Vec<T>>,
    released: bool,
    pub mode: ForwardMode,
    pub checked: bool,
    corrupt: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_mode(ForwardMode::default())
    }

    pub fn with_mode(mode: ForwardMode) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            op_counts: HashMap::new(),
            batch_stats: HashMap::new(),
            released: false,
            mode,
            checked: checked_default(),
            corrupt: None,
        }
    }

    /// Test hook: scale the input gradients produced by `kind` by 1.01 so a
    /// gradient check can be shown to catch a broken backward rule.
    pub fn corrupt_backward(&mut self, kind: Option<OpKind>) {
        self.corrupt = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_count(&self, kind: OpKind) -> usize {
        self.op_counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_var(id).and_then(|v| self.grad(v))
    }

    /// Batch statistic recorded for a running-statistics buffer, if any.
    pub fn recorded_stats(&self, id: ParamId) -> Option<&[T]> {
        self.batch_stats.get(&id).map(Vec::as_slice)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        let kind = op.kind();
        if let Some(kind) = kind {
            if self.checked && !value.is_finite() {
                return Err(Error::NonFinite { op: kind.name() });
            }
            *self.op_counts.entry(kind).or_default() += 1;
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a model parameter; repeated calls return the same handle.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let rg = p.learnable && !self.mode.freeze_params;
        let v = self.leaf(p.value.clone(), rg);
        self.params.insert(p.id(), v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data());
        let out = ops::conv2d(self.value(x), self.value(w), bias, spec)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(out, Op::Conv2d { x, w, b, spec: *spec }, rg)
    }

    /// Inference-mode batch norm with learnable `gamma`/`beta` handles.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let bn = BatchNormParams {
            gamma: self.value(gamma).data().to_vec(),
            beta: self.value(beta).data().to_vec(),
            running_mean: running_mean.to_vec(),
            running_var: running_var.to_vec(),
            eps,
        };
        let out = ops::batchnorm_infer(self.value(x), &bn)?;
        let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
                batch: false,
            },
            rg,
        )
    }

    /// Training-mode batch norm. The batch mean and unbiased variance are
    /// recorded under `stats_keys` (running mean, running var) for a later
    /// running-statistics update.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        stats_keys: Option<(ParamId, ParamId)>,
    ) -> Result<Var> {
        let stats = ops::batch_stats(self.value(x));
        let c = stats.mean.len();
        if self.shape(gamma).numel() != c || self.shape(beta).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_train",
                dim: "channels",
                expected: c,
                got: self.shape(gamma).numel(),
            });
        }
        let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let scale: Vec<T> = (0..c).map(|i| g[i] * inv_std[i]).collect();
        let shift: Vec<T> = (0..c).map(|i| b[i] - stats.mean[i] * scale[i]).collect();
        let out = ops::channel_affine(self.value(x), &scale, &shift)?;
        if let Some((mean_key, var_key)) = stats_keys {
            let m = stats.count as f64;
            let corr = if m > 1.0 { T::of(m / (m - 1.0)) } else { T::one() };
            self.batch_stats.insert(mean_key, stats.mean.clone());
            self.batch_stats
                .insert(var_key, stats.var.iter().map(|&v| v * corr).collect());
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: stats.mean,
                inv_std,
                batch: true,
            },
            rg,
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = ops::silu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    /// SiLU unless the tape bypasses activations.
    pub fn act(&mut self, x: Var) -> Result<Var> {
        if self.mode.bypass_activations {
            Ok(x)
        } else {
            self.silu(x)
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample_nearest2x(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Upsample(x), rg)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&vals)?;
        let rg = self.rg(xs);
        self.push(out, Op::Concat(xs.to_vec()), rg)
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::narrow_channels(self.value(x), start, len)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Narrow { x, start }, rg)
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        ops::check_split(self.shape(x), sizes)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow_channels(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::full([1, 1, 1, 1], s), Op::Sum(x), rg)
    }

    /// `sum(x * weights)` with a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                dim: "numel",
                expected: xv.numel(),
                got: weights.numel(),
            });
        }
        let s: T = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::full([1, 1, 1, 1], s), Op::WeightedSum { x, weights }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    /// Mean softmax cross-entropy over the batch; logits are `(N, K, 1, 1)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.h() != 1 || s.w() != 1 || s.n() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                dim: "batch",
                expected: labels.len(),
                got: s.n(),
            });
        }
        let k = s.c();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::config(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = lv.clone();
        let mut loss = T::zero();
        for (row, &label) in probs.data_mut().chunks_mut(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
            loss -= row[label].ln();
        }
        loss = loss / T::of(labels.len() as f64);
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::full([1, 1, 1, 1], loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Back-propagates from a scalar `loss`, filling gradients of every node
    /// that requires them. The graph is released afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.released {
            return Err(Error::GraphReleased);
        }
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let kind = op.kind();
            let contribs = self.backward_op(&op, &dy)?;
            self.nodes[i].op = op;
            grads[i] = Some(dy);
            let scale = (self.corrupt.is_some() && self.corrupt == kind).then(|| T::of(1.01));
            for (v, mut g) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if let Some(s) = scale {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        self.grads = grads;
        self.released = true;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, op: &Op<T>, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    out.push((*x, ops::conv2d_backward_input(dy, self.value(*w), spec, xs)));
                }
                if self.needs(*w) {
                    out.push((*w, ops::conv2d_backward_weight(dy, self.value(*x), spec)));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let g = ops::channel_sums(dy);
                        out.push((*b, Tensor::new(self.shape(*b), g)?));
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
            } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let c = s.c();
                let plane = s.plane();
                let g = self.value(*gamma).data();
                // Per-channel sums of dy and dy * xhat.
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for n in 0..s.n() {
                    for ch in 0..c {
                        let base = (n * c + ch) * plane;
                        for j in 0..plane {
                            let xhat = (xv.data()[base + j] - mean[ch]) * inv_std[ch];
                            sum_dy[ch] += dy.data()[base + j];
                            sum_dy_xhat[ch] += dy.data()[base + j] * xhat;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); s.numel()];
                    let m = T::of((s.n() * plane) as f64);
                    for n in 0..s.n() {
                        for ch in 0..c {
                            let base = (n * c + ch) * plane;
                            let k = g[ch] * inv_std[ch];
                            for j in 0..plane {
                                let d = dy.data()[base + j];
                                dx[base + j] = if *batch {
                                    let xhat = (xv.data()[base + j] - mean[ch]) * inv_std[ch];
                                    k * (d - sum_dy[ch] / m - xhat * sum_dy_xhat[ch] / m)
                                } else {
                                    k * d
                                };
                            }
                        }
                    }
                    out.push((*x, Tensor::new(s, dx)?));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, Tensor::new(self.shape(*gamma), sum_dy_xhat)?));
                }
                if self.needs(*beta) {
                    out.push((*beta, Tensor::new(self.shape(*beta), sum_dy)?));
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &d)| d * ops::silu_grad(v))
                    .collect();
                out.push((*x, Tensor::new(xv.shape(), data)?));
            }
            Op::Add(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Upsample(x) => out.push((*x, ops::upsample_backward(dy))),
            Op::Concat(xs) => {
                let mut start = 0;
                for &v in xs {
                    let len = self.shape(v).c();
                    if self.needs(v) {
                        out.push((v, ops::narrow_channels(dy, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, start } => {
                let xs = self.shape(*x);
                let len = dy.shape().c();
                let plane = xs.plane();
                let mut g = vec![T::zero(); xs.numel()];
                for n in 0..xs.n() {
                    let dst = (n * xs.c() + start) * plane;
                    let src = n * len * plane;
                    g[dst..dst + len * plane].copy_from_slice(&dy.data()[src..src + len * plane]);
                }
                out.push((*x, Tensor::new(xs, g)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.shape(*x), dy.data()[0])));
            }
            Op::WeightedSum { x, weights } => {
                let d = dy.data()[0];
                out.push((*x, weights.map(|w| w * d)));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let inv = T::one() / T::of(xs.plane() as f64);
                let g = Tensor::from_fn(xs, |[n, c, _, _]| dy.at([n, c, 0, 0]) * inv);
                out.push((*x, g));
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let k = probs.shape().c();
                let scale = dy.data()[0] / T::of(labels.len() as f64);
                let mut g = probs.clone();
                for (row, &label) in g.data_mut().chunks_mut(k).zip(labels) {
                    row[label] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                out.push((*logits, g));
            }
        }
        Ok(out)
    }
}
