//! Inverted bottleneck and the RepHELAN aggregation block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBn, Layer, Unit, UnitMut};
use crate::ops::ConvSpec;
use crate::rep_conv::{default_small_kernels, RepHDWConv};
use crate::tensor::{join, Scalar};

/// Kernel used when the large-kernel toggle is off.
pub const SMALL_KERNEL: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BottleneckConfig {
    pub channels: usize,
    #[serde(default = "default_expansion")]
    pub expansion: f64,
    pub kernel: usize,
    #[serde(default = "yes")]
    pub use_rep: bool,
    #[serde(default = "yes")]
    pub use_large: bool,
}

fn default_expansion() -> f64 {
    2.0
}

fn yes() -> bool {
    true
}

impl BottleneckConfig {
    pub fn new(channels: usize, kernel: usize) -> Self {
        BottleneckConfig {
            channels,
            expansion: default_expansion(),
            kernel,
            use_rep: true,
            use_large: true,
        }
    }

    pub fn expanded(&self) -> usize {
        (self.channels as f64 * self.expansion).round() as usize
    }

    /// Depthwise kernel actually built, after the large-kernel toggle.
    pub fn effective_kernel(&self) -> usize {
        if self.use_large {
            self.kernel
        } else {
            SMALL_KERNEL
        }
    }

    pub fn small_kernels(&self) -> Result<Vec<usize>> {
        if self.use_rep {
            default_small_kernels(self.effective_kernel())
        } else {
            Ok(Vec::new())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("bottleneck channels must be positive"));
        }
        if !(self.expansion.is_finite() && self.expansion > 0.0) || self.expanded() < self.channels {
            return Err(Error::config(format!(
                "bottleneck expansion {} must give at least {} channels",
                self.expansion, self.channels
            )));
        }
        if self.kernel.is_multiple_of(2) || self.kernel < 3 {
            return Err(Error::config(format!(
                "bottleneck kernel {} must be odd and >= 3",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// `pw_shrink(silu(dw(silu(pw_expand(x)))))`, shape-preserving.
#[derive(Clone, Debug)]
pub struct Bottleneck<T: Scalar = f32> {
    pub config: BottleneckConfig,
    pub pw_expand: ConvBn<T>,
    pub dw: RepHDWConv<T>,
    pub pw_shrink: ConvBn<T>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new(config: BottleneckConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let e = config.expanded();
        Ok(Bottleneck {
            pw_expand: ConvBn::new(ConvSpec::new(c, e, 1), true, rng)?,
            dw: RepHDWConv::new(e, config.effective_kernel(), config.small_kernels()?, rng)?,
            pw_shrink: ConvBn::new(ConvSpec::new(e, c, 1), false, rng)?,
            config,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = tape.shape(x).c();
        if c != self.config.channels {
            return Err(Error::ShapeMismatch {
                op: "bottleneck",
                dim: "channels",
                expected: self.config.channels,
                got: c,
            });
        }
        let h = self.pw_expand.forward(tape, x)?;
        let h = self.dw.forward(tape, h)?;
        let h = tape.act(h)?;
        self.pw_shrink.forward(tape, h)
    }
}

impl<T: Scalar> Layer<T> for Bottleneck<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        out.push((join(prefix, "pw_expand"), Unit::ConvBn(&self.pw_expand)));
        out.push((join(prefix, "dw"), Unit::Rep(&self.dw)));
        out.push((join(prefix, "pw_shrink"), Unit::ConvBn(&self.pw_shrink)));
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        out.push((join(prefix, "pw_expand"), UnitMut::ConvBn(&mut self.pw_expand)));
        out.push((join(prefix, "dw"), UnitMut::Rep(&mut self.dw)));
        out.push((join(prefix, "pw_shrink"), UnitMut::ConvBn(&mut self.pw_shrink)));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelanConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    pub n_bottlenecks: usize,
    pub kernel: usize,
    #[serde(default = "default_expansion")]
    pub expansion: f64,
    #[serde(default = "yes")]
    pub use_elan: bool,
    #[serde(default = "yes")]
    pub use_rep: bool,
    #[serde(default = "yes")]
    pub use_large: bool,
}

impl HelanConfig {
    /// Hidden width half of `out_channels`, two bottlenecks, all toggles on.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        HelanConfig {
            in_channels,
            out_channels,
            hidden: (out_channels / 2).max(1),
            n_bottlenecks: 2,
            kernel,
            expansion: default_expansion(),
            use_elan: true,
            use_rep: true,
            use_large: true,
        }
    }

    pub fn bottleneck(&self) -> BottleneckConfig {
        BottleneckConfig {
            channels: self.hidden,
            expansion: self.expansion,
            kernel: self.kernel,
            use_rep: self.use_rep,
            use_large: self.use_large,
        }
    }

    /// Width of the concatenation that feeds the output projection.
    pub fn concat_width(&self) -> usize {
        if self.use_elan {
            (2 + self.n_bottlenecks) * self.hidden
        } else {
            2 * self.hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.hidden == 0 {
            return Err(Error::config("HELAN widths must be positive"));
        }
        if self.n_bottlenecks < 1 {
            return Err(Error::config("HELAN needs at least one bottleneck"));
        }
        self.bottleneck().validate()
    }
}

/// Block-level settings shared by every HELAN in a network; widths and
/// kernel come from where the block sits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HelanStyle {
    pub n_bottlenecks: usize,
    pub expansion: f64,
    /// Hidden width as a fraction of the block's output width.
    pub hidden_ratio: f64,
    pub use_elan: bool,
    pub use_rep: bool,
    pub use_large: bool,
}

impl Default for HelanStyle {
    fn default() -> Self {
        HelanStyle {
            n_bottlenecks: 2,
            expansion: default_expansion(),
            hidden_ratio: 0.5,
            use_elan: true,
            use_rep: true,
            use_large: true,
        }
    }
}

impl HelanStyle {
    pub fn config(&self, in_channels: usize, out_channels: usize, kernel: usize) -> HelanConfig {
        HelanConfig {
            in_channels,
            out_channels,
            hidden: ((out_channels as f64 * self.hidden_ratio).round() as usize).max(1),
            n_bottlenecks: self.n_bottlenecks,
            kernel,
            expansion: self.expansion,
            use_elan: self.use_elan,
            use_rep: self.use_rep,
            use_large: self.use_large,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hidden_ratio > 0.0 && self.hidden_ratio <= 1.0) {
            return Err(Error::config(format!(
                "hidden_ratio {} must be in (0, 1]",
                self.hidden_ratio
            )));
        }
        self.config(8, 8, 3).validate()
    }
}

/// Values produced inside a HELAN forward pass.
#[derive(Clone, Debug)]
pub struct HelanTrace {
    pub split: (Var, Var),
    pub chain: Vec<Var>,
    pub concat: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Helan<T: Scalar = f32> {
    pub config: HelanConfig,
    pub pw_in: ConvBn<T>,
    pub bottlenecks: Vec<Bottleneck<T>>,
    pub pw_out: ConvBn<T>,
}

impl<T: Scalar> Helan<T> {
    pub fn new(config: HelanConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let pw_in = ConvBn::new(ConvSpec::new(config.in_channels, 2 * h, 1), true, rng)?;
        let bottlenecks = (0..config.n_bottlenecks)
            .map(|_| Bottleneck::new(config.bottleneck(), rng))
            .collect::<Result<_>>()?;
        let pw_out = ConvBn::new(ConvSpec::new(config.concat_width(), config.out_channels, 1), true, rng)?;
        Ok(Helan {
            config,
            pw_in,
            bottlenecks,
            pw_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, x)?.out)
    }

    pub fn forward_traced(&self, tape: &mut Tape<T>, x: Var) -> Result<HelanTrace> {
        let c = tape.shape(x).c();
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "helan",
                dim: "channels",
                expected: self.config.in_channels,
                got: c,
            });
        }
        let h = self.config.hidden;
        let y = self.pw_in.forward(tape, x)?;
        let halves = tape.split_channels(y, &[h, h])?;
        let (s0, s1) = (halves[0], halves[1]);
        let mut chain = Vec::with_capacity(self.bottlenecks.len());
        let mut cur = s1;
        for b in &self.bottlenecks {
            cur = b.forward(tape, cur)?;
            chain.push(cur);
        }
        let lanes: Vec<Var> = if self.config.use_elan {
            [s0, s1].into_iter().chain(chain.iter().copied()).collect()
        } else {
            vec![s0, cur]
        };
        let concat = tape.concat_channels(&lanes)?;
        let out = self.pw_out.forward(tape, concat)?;
        Ok(HelanTrace {
            split: (s0, s1),
            chain,
            concat,
            out,
        })
    }

    /// Depthwise kernel size of the bottleneck chain.
    pub fn kernel(&self) -> usize {
        self.config.bottleneck().effective_kernel()
    }
}

impl<T: Scalar> Layer<T> for Helan<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        out.push((join(prefix, "pw_in"), Unit::ConvBn(&self.pw_in)));
        for (i, b) in self.bottlenecks.iter().enumerate() {
            b.units(&join(prefix, &format!("m{i}")), out);
        }
        out.push((join(prefix, "pw_out"), Unit::ConvBn(&self.pw_out)));
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        out.push((join(prefix, "pw_in"), UnitMut::ConvBn(&mut self.pw_in)));
        for (i, b) in self.bottlenecks.iter_mut().enumerate() {
            b.units_mut(&join(prefix, &format!("m{i}")), out);
        }
        out.push((join(prefix, "pw_out"), UnitMut::ConvBn(&mut self.pw_out)));
    }
}
