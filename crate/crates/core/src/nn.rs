//! Parameterised layers shared by every block: plain convolutions, batch
//! norm, and the conv + BN (+ SiLU) unit, plus the [`Layer`] traversal trait.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchNormParams, ConvSpec};
use crate::rep_conv::{fold_bn, RepHDWConv};
use crate::tensor::{join, Param, Scalar, Tensor};

/// He-normal initialisation for a convolution weight.
pub(crate) fn init_weight<T: Scalar>(spec: &ConvSpec, rng: &mut impl Rng) -> Tensor<T> {
    let fan_in = spec.in_channels / spec.groups * spec.kernel * spec.kernel;
    Tensor::randn(spec.weight_shape(), (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv<T: Scalar = f32> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv<T> {
    pub fn new(spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        Ok(Conv {
            spec,
            weight: Param::new(init_weight(&spec, rng)),
            bias: spec
                .has_bias
                .then(|| Param::new(Tensor::zeros([1, spec.out_channels, 1, 1]))),
        })
    }

    pub fn from_parts(spec: ConvSpec, weight: Tensor<T>, bias: Option<Vec<T>>) -> Result<Self> {
        let spec = ConvSpec {
            has_bias: bias.is_some(),
            ..spec
        };
        spec.validate()?;
        if weight.shape() != spec.weight_shape() {
            return Err(Error::config(format!(
                "weight shape {} does not match {}",
                weight.shape(),
                spec.weight_shape()
            )));
        }
        Ok(Conv {
            spec,
            weight: Param::new(weight),
            bias: bias.map(|b| Param::new(Tensor::vector(b))),
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, w, b, &self.spec)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self::from_params(&BatchNormParams::identity(channels))
    }

    pub fn from_params(bn: &BatchNormParams<T>) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::vector(bn.gamma.clone())),
            beta: Param::new(Tensor::vector(bn.beta.clone())),
            running_mean: Param::buffer(Tensor::vector(bn.running_mean.clone())),
            running_var: Param::buffer(Tensor::vector(bn.running_var.clone())),
            eps: bn.eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn params(&self) -> BatchNormParams<T> {
        BatchNormParams {
            gamma: self.gamma.value.data().to_vec(),
            beta: self.beta.value.data().to_vec(),
            running_mean: self.running_mean.value.data().to_vec(),
            running_var: self.running_var.value.data().to_vec(),
            eps: self.eps,
        }
    }

    /// Draws non-trivial statistics so folding is exercised away from identity.
    pub fn randomize(&mut self, rng: &mut impl Rng) {
        let c = self.channels();
        let draw = |lo: f64, hi: f64, rng: &mut dyn rand::RngCore| -> Vec<T> {
            (0..c).map(|_| T::of(rng.random_range(lo..hi))).collect()
        };
        self.gamma.value = Tensor::vector(draw(0.5, 1.5, rng));
        self.beta.value = Tensor::vector(draw(-0.5, 0.5, rng));
        self.running_mean.value = Tensor::vector(draw(-0.5, 0.5, rng));
        self.running_var.value = Tensor::vector(draw(0.5, 2.0, rng));
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        if tape.mode.batch_stats {
            let keys = (self.running_mean.id(), self.running_var.id());
            tape.batchnorm_train(x, g, b, self.eps, Some(keys))
        } else {
            tape.batchnorm(
                x,
                g,
                b,
                self.running_mean.value.data(),
                self.running_var.value.data(),
                self.eps,
            )
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Convolution followed by batch norm and an optional SiLU. Folds into a
/// single biased convolution for inference.
#[derive(Clone, Debug)]
pub struct ConvBn<T: Scalar = f32> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
    pub act: bool,
    pub fused: Option<Conv<T>>,
    pub training: bool,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(spec: ConvSpec, act: bool, rng: &mut impl Rng) -> Result<Self> {
        let spec = spec.bias(false);
        Ok(ConvBn {
            conv: Conv::new(spec, rng)?,
            bn: BatchNorm::new(spec.out_channels),
            act,
            fused: None,
            training: false,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.conv.spec
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = if tape.mode.fused {
            self.fused
                .as_ref()
                .ok_or_else(|| Error::NotFused { unit: "conv-bn".into() })?
                .forward(tape, x)?
        } else {
            let y = self.conv.forward(tape, x)?;
            self.bn.forward(tape, y)?
        };
        if self.act {
            tape.act(y)
        } else {
            Ok(y)
        }
    }

    pub fn fuse(&mut self) -> Result<()> {
        if self.training {
            return Err(Error::FuseWhileTraining { unit: "conv-bn".into() });
        }
        let (w, b) = fold_bn(&self.conv.weight.value, &self.bn.params())?;
        self.fused = Some(Conv::from_parts(self.conv.spec, w, Some(b))?);
        Ok(())
    }
}

/// A reference to one parameter-owning unit in a layer tree.
pub enum Unit<'a, T: Scalar> {
    Conv(&'a Conv<T>),
    ConvBn(&'a ConvBn<T>),
    Rep(&'a RepHDWConv<T>),
}

pub enum UnitMut<'a, T: Scalar> {
    Conv(&'a mut Conv<T>),
    ConvBn(&'a mut ConvBn<T>),
    Rep(&'a mut RepHDWConv<T>),
}

/// Structural description of one unit, for inventories and summaries.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    /// Depthwise branch kernels, large first. Empty for plain convolutions.
    pub branch_kernels: Vec<usize>,
}

impl LayerInfo {
    fn conv(name: String, kind: &'static str, spec: &ConvSpec) -> Self {
        LayerInfo {
            name,
            kind,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            groups: spec.groups,
            branch_kernels: Vec::new(),
        }
    }

    pub fn is_depthwise(&self) -> bool {
        !self.branch_kernels.is_empty()
    }
}

/// A tree of units. Implementors list their units in a fixed order; every
/// other traversal (parameter visiting, fusion, serialisation) derives from it.
pub trait Layer<T: Scalar> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>);
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>);

    fn unit_list(&self) -> Vec<(String, Unit<'_, T>)> {
        let mut out = Vec::new();
        self.units("", &mut out);
        out
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (name, unit) in self.unit_list() {
            match unit {
                Unit::Conv(c) => c.visit(&name, f),
                Unit::ConvBn(u) => {
                    u.conv.visit(&join(&name, "conv"), f);
                    u.bn.visit(&join(&name, "bn"), f);
                    if let Some(fc) = &u.fused {
                        fc.visit(&join(&name, "fused"), f);
                    }
                }
                Unit::Rep(r) => r.visit(&name, f),
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let mut list = Vec::new();
        self.units_mut("", &mut list);
        for (name, unit) in list {
            match unit {
                UnitMut::Conv(c) => c.visit_mut(&name, f),
                UnitMut::ConvBn(u) => {
                    u.conv.visit_mut(&join(&name, "conv"), f);
                    u.bn.visit_mut(&join(&name, "bn"), f);
                    if let Some(fc) = &mut u.fused {
                        fc.visit_mut(&join(&name, "fused"), f);
                    }
                }
                UnitMut::Rep(r) => r.visit_mut(&name, f),
            }
        }
    }

    /// Learnable parameters of the training-mode graph.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |name, p| {
            if p.learnable && !name.contains("fused.") {
                n += p.value.numel();
            }
        });
        n
    }

    /// Folds every BN and merges every RepHDW unit.
    fn fuse(&mut self) -> Result<()> {
        let mut list = Vec::new();
        self.units_mut("", &mut list);
        for (name, unit) in list {
            let r = match unit {
                UnitMut::Conv(_) => Ok(()),
                UnitMut::ConvBn(u) => u.fuse(),
                UnitMut::Rep(r) => r.fuse(),
            };
            r.map_err(|e| match e {
                Error::FuseWhileTraining { .. } => Error::FuseWhileTraining { unit: name.clone() },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Drops fused weights (they go stale once training updates the branches).
    fn unfuse(&mut self) {
        let mut list = Vec::new();
        self.units_mut("", &mut list);
        for (_, unit) in list {
            match unit {
                UnitMut::Conv(_) => {}
                UnitMut::ConvBn(u) => u.fused = None,
                UnitMut::Rep(r) => r.fused = None,
            }
        }
    }

    fn is_fused(&self) -> bool {
        self.unit_list().iter().all(|(_, u)| match u {
            Unit::Conv(_) => true,
            Unit::ConvBn(c) => c.fused.is_some(),
            Unit::Rep(r) => r.fused.is_some(),
        })
    }

    fn set_training(&mut self, on: bool) {
        let mut list = Vec::new();
        self.units_mut("", &mut list);
        for (_, unit) in list {
            match unit {
                UnitMut::Conv(_) => {}
                UnitMut::ConvBn(u) => u.training = on,
                UnitMut::Rep(r) => r.training = on,
            }
        }
    }

    /// One row per unit, in traversal order.
    fn inventory(&self) -> Vec<LayerInfo> {
        self.unit_list()
            .into_iter()
            .map(|(name, unit)| match unit {
                Unit::Conv(c) => LayerInfo::conv(name, "conv", &c.spec),
                Unit::ConvBn(u) => LayerInfo::conv(name, "conv-bn", &u.conv.spec),
                Unit::Rep(r) => LayerInfo {
                    name,
                    kind: if r.branches.len() > 1 { "rephdw" } else { "dwconv" },
                    in_channels: r.channels,
                    out_channels: r.channels,
                    kernel: r.large_kernel,
                    stride: 1,
                    groups: r.channels,
                    branch_kernels: r.branches.iter().map(|b| b.kernel).collect(),
                },
            })
            .collect()
    }

    /// Re-draws every BN's affine parameters and running statistics.
    fn randomize_bn(&mut self, mut rng: &mut dyn rand::RngCore) {
        let mut list = Vec::new();
        self.units_mut("", &mut list);
        for (_, unit) in list {
            match unit {
                UnitMut::Conv(_) => {}
                UnitMut::ConvBn(u) => u.bn.randomize(&mut rng),
                UnitMut::Rep(r) => r.branches.iter_mut().for_each(|b| b.bn.randomize(&mut rng)),
            }
        }
    }
}

impl<T: Scalar> Layer<T> for Conv<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        out.push((prefix.to_string(), Unit::Conv(self)));
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        out.push((prefix.to_string(), UnitMut::Conv(self)));
    }
}

impl<T: Scalar> Layer<T> for ConvBn<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        out.push((prefix.to_string(), Unit::ConvBn(self)));
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        out.push((prefix.to_string(), UnitMut::ConvBn(self)));
    }
}

impl<T: Scalar> Layer<T> for RepHDWConv<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        out.push((prefix.to_string(), Unit::Rep(self)));
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        out.push((prefix.to_string(), UnitMut::Rep(self)));
    }
}

/// Plain SGD: `p -= lr * grad` for every learnable parameter the tape saw.
/// Fused weights are dropped because they no longer match the branches.
pub fn sgd_step<T: Scalar, L: Layer<T> + ?Sized>(layer: &mut L, tape: &Tape<T>, lr: T) {
    layer.visit_mut(&mut |_, p| {
        if !p.learnable {
            return;
        }
        if let Some(g) = tape.param_grad(p.id()) {
            for (v, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * d;
            }
        }
    });
    layer.unfuse();
}

/// Exponential running-statistics update from a training-mode forward pass:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn update_running_stats<T: Scalar, L: Layer<T> + ?Sized>(layer: &mut L, tape: &Tape<T>, momentum: T) {
    layer.visit_mut(&mut |_, p| {
        if let Some(stat) = tape.recorded_stats(p.id()) {
            for (r, &s) in p.value.data_mut().iter_mut().zip(stat) {
                *r = (T::one() - momentum) * *r + momentum * s;
            }
        }
    });
}

/// BN momentum used by the toy trainer.
pub const BN_MOMENTUM: f64 = 0.1;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn convbn_fold_matches_unfused() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut u = ConvBn::<f64>::new(ConvSpec::new(3, 5, 3).stride(2), true, &mut rng).unwrap();
        u.bn.randomize(&mut rng);
        u.fuse().unwrap();
        let x = Tensor::randn([2, 3, 9, 9], 1.0, &mut rng);
        let run = |fused: bool| {
            let mut tape = Tape::with_mode(crate::autograd::ForwardMode {
                fused,
                ..Default::default()
            });
            let xv = tape.constant(x.clone());
            let y = u.forward(&mut tape, xv).unwrap();
            tape.value(y).clone()
        };
        assert!(run(false).max_abs_diff(&run(true)) < 1e-12);
    }

    #[test]
    fn fused_forward_requires_fuse() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = ConvBn::<f32>::new(ConvSpec::new(2, 2, 1), false, &mut rng).unwrap();
        let mut tape = Tape::with_mode(crate::autograd::ForwardMode {
            fused: true,
            ..Default::default()
        });
        let x = tape.constant(Tensor::ones([1, 2, 2, 2]));
        assert!(matches!(u.forward(&mut tape, x), Err(Error::NotFused { .. })));
    }

    #[test]
    fn fuse_rejected_while_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut u = ConvBn::<f32>::new(ConvSpec::new(2, 2, 1), false, &mut rng).unwrap();
        u.set_training(true);
        assert!(matches!(u.fuse(), Err(Error::FuseWhileTraining { .. })));
        u.set_training(false);
        u.fuse().unwrap();
    }

    #[test]
    fn visit_names_are_hierarchical() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = ConvBn::<f32>::new(ConvSpec::new(2, 4, 3), true, &mut rng).unwrap();
        let mut names = Vec::new();
        u.visit(&mut |n, _| names.push(n.to_string()));
        assert_eq!(
            names,
            [
                "conv.weight",
                "bn.gamma",
                "bn.beta",
                "bn.running_mean",
                "bn.running_var"
            ]
        );
        assert_eq!(u.param_count(), 2 * 4 * 9 + 8);
    }
}
