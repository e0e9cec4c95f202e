//! Full network: backbone (P2..P5), MAFPN neck and a per-level head stub.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::blocks::{Helan, HelanStyle};
use crate::cost::{flat_rows, unit_rows, CostReport, CostRow, Costed};
use crate::error::{Error, Result};
use crate::mafpn::{Mafpn, NeckConfig};
use crate::nn::{Conv, ConvBn, Layer, LayerInfo, Unit, UnitMut};
use crate::ops::ConvSpec;
use crate::rep_conv::RepHDWConv;
use crate::tensor::{join, Scalar, Tensor};

/// Every input side must be a multiple of the deepest stride.
pub const STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Width after the first 1x1 projection.
    pub width: usize,
    /// Large kernel of the depthwise stack.
    pub kernel: usize,
    /// Number of RepHDW convs.
    pub depth: usize,
    /// Channels of each raw output map.
    pub out_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            width: 64,
            kernel: 7,
            depth: 2,
            out_channels: 84,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem: usize,
    /// Output widths of the four backbone stages (P2..P5).
    pub stage_widths: Vec<usize>,
    /// Bottlenecks per stage HELAN.
    pub stage_depths: Vec<usize>,
    /// Depthwise kernel per stage; strictly increasing odd sizes.
    pub backbone_kernels: Vec<usize>,
    #[serde(default)]
    pub block: HelanStyle,
    pub neck: NeckConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_in_channels() -> usize {
    3
}

impl ModelConfig {
    /// The nano network.
    pub fn nano() -> Self {
        ModelConfig {
            in_channels: 3,
            stem: 16,
            stage_widths: vec![48, 96, 192, 256],
            stage_depths: vec![1, 2, 2, 1],
            backbone_kernels: vec![3, 5, 7, 9],
            block: HelanStyle::default(),
            neck: NeckConfig::default(),
            head: HeadConfig::default(),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(format!("{field}: {msg}")));
        if self.in_channels == 0 {
            return fail("in_channels", "must be positive".into());
        }
        if self.stem == 0 {
            return fail("stem", "must be positive".into());
        }
        for (field, list) in [
            ("stage_widths", &self.stage_widths),
            ("stage_depths", &self.stage_depths),
            ("backbone_kernels", &self.backbone_kernels),
        ] {
            if list.len() != 4 {
                return fail(field, format!("expected 4 stages (P2..P5), got {}", list.len()));
            }
            if let Some(i) = list.iter().position(|&v| v == 0) {
                return fail(&format!("{field}[{i}]"), "must be positive".into());
            }
        }
        let k = &self.backbone_kernels;
        if k.iter().any(|&v| v % 2 == 0) || k.windows(2).any(|w| w[0] >= w[1]) {
            return fail(
                "backbone_kernels",
                format!("{k:?} must be strictly increasing odd sizes"),
            );
        }
        if k[0] < 3 {
            return fail("backbone_kernels[0]", "must be at least 3".into());
        }
        self.block
            .validate()
            .map_err(|e| Error::config(format!("block: {e}")))?;
        self.neck.validate()?;
        let h = &self.head;
        if h.width == 0 || h.out_channels == 0 {
            return fail("head", "widths must be positive".into());
        }
        if h.kernel.is_multiple_of(2) || h.kernel < 3 {
            return fail("head.kernel", format!("{} must be odd and >= 3", h.kernel));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Stage<T: Scalar = f32> {
    pub down: ConvBn<T>,
    pub helan: Helan<T>,
}

/// Stem plus four stride-2 stages producing P2..P5.
#[derive(Clone, Debug)]
pub struct Backbone<T: Scalar = f32> {
    pub stem: ConvBn<T>,
    pub stages: Vec<Stage<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let stem = ConvBn::new(ConvSpec::new(cfg.in_channels, cfg.stem, 3).stride(2), true, rng)?;
        let mut prev = cfg.stem;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let w = cfg.stage_widths[i];
            let mut style = cfg.block.clone();
            style.n_bottlenecks = cfg.stage_depths[i];
            let down = ConvBn::new(ConvSpec::new(prev, w, 3).stride(2), true, rng)?;
            let helan = Helan::new(style.config(w, w, cfg.backbone_kernels[i]), rng)?;
            stages.push(Stage { down, helan });
            prev = w;
        }
        Ok(Backbone { stem, stages })
    }

    /// Returns the stem output and P2..P5.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, [Var; 4])> {
        let stem = self.stem.forward(tape, x)?;
        let mut h = stem;
        let mut taps = [stem; 4];
        for (i, st) in self.stages.iter().enumerate() {
            h = st.down.forward(tape, h)?;
            h = st.helan.forward(tape, h)?;
            taps[i] = h;
        }
        Ok((stem, taps))
    }

    pub fn widths(&self) -> [usize; 4] {
        let mut w = [0; 4];
        for (i, st) in self.stages.iter().enumerate() {
            w[i] = st.helan.config.out_channels;
        }
        w
    }
}

impl<T: Scalar> Layer<T> for Backbone<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        out.push((join(prefix, "stem"), Unit::ConvBn(&self.stem)));
        for (i, st) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            out.push((join(&p, "down"), Unit::ConvBn(&st.down)));
            st.helan.units(&join(&p, "helan"), out);
        }
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        out.push((join(prefix, "stem"), UnitMut::ConvBn(&mut self.stem)));
        for (i, st) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            out.push((join(&p, "down"), UnitMut::ConvBn(&mut st.down)));
            st.helan.units_mut(&join(&p, "helan"), out);
        }
    }
}

impl<T: Scalar> Costed<T> for Backbone<T> {
    fn cost(&self, prefix: &str, in_hw: (usize, usize), fused: bool, rows: &mut Vec<CostRow>) -> (usize, usize) {
        let mut hw = unit_rows(&join(prefix, "stem"), &Unit::ConvBn(&self.stem), in_hw, fused, rows);
        for (i, st) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            hw = unit_rows(&join(&p, "down"), &Unit::ConvBn(&st.down), hw, fused, rows);
            st.helan.cost(&join(&p, "helan"), hw, fused, rows);
        }
        hw
    }
}

/// Per-level head stub: 1x1 projection, a stack of RepHDW convs, 1x1 output.
#[derive(Clone, Debug)]
pub struct Head<T: Scalar = f32> {
    pub proj: ConvBn<T>,
    pub dws: Vec<RepHDWConv<T>>,
    pub out: Conv<T>,
}

impl<T: Scalar> Head<T> {
    fn new(c_in: usize, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Head {
            proj: ConvBn::new(ConvSpec::new(c_in, cfg.width, 1), true, rng)?,
            dws: (0..cfg.depth)
                .map(|_| RepHDWConv::with_default_branches(cfg.width, cfg.kernel, rng))
                .collect::<Result<_>>()?,
            out: Conv::new(ConvSpec::new(cfg.width, cfg.out_channels, 1).bias(true), rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = self.proj.forward(tape, x)?;
        for dw in &self.dws {
            h = dw.forward(tape, h)?;
            h = tape.act(h)?;
        }
        self.out.forward(tape, h)
    }
}

impl<T: Scalar> Layer<T> for Head<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        out.push((join(prefix, "proj"), Unit::ConvBn(&self.proj)));
        for (i, d) in self.dws.iter().enumerate() {
            out.push((join(prefix, &format!("dw{i}")), Unit::Rep(d)));
        }
        out.push((join(prefix, "out"), Unit::Conv(&self.out)));
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        out.push((join(prefix, "proj"), UnitMut::ConvBn(&mut self.proj)));
        for (i, d) in self.dws.iter_mut().enumerate() {
            out.push((join(prefix, &format!("dw{i}")), UnitMut::Rep(d)));
        }
        out.push((join(prefix, "out"), UnitMut::Conv(&mut self.out)));
    }
}

/// Named intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Taps {
    pub named: Vec<(&'static str, Var)>,
    pub outputs: [Var; 3],
}

impl Taps {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.named.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

pub const TAP_NAMES: [&str; 11] = [
    "stem", "p2", "p3", "p4", "p5", "n3", "n4", "n5", "head3", "head4", "head5",
];

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub neck: Mafpn<T>,
    pub heads: Vec<Head<T>>,
}

impl<T: Scalar> Model<T> {
    /// Validates `cfg` and initialises every weight from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = Backbone::new(cfg, &mut rng)?;
        let neck = Mafpn::new(cfg.neck.clone(), backbone.widths(), &mut rng)?;
        let heads = neck
            .out_widths()
            .iter()
            .map(|&c| Head::new(c, &cfg.head, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Model {
            config: cfg.clone(),
            backbone,
            neck,
            heads,
        })
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(STRIDE) || !w.is_multiple_of(STRIDE) {
            return Err(Error::InputNotDivisible { h, w, multiple: STRIDE });
        }
        Ok(())
    }

    /// Runs the network and records every named tap.
    pub fn forward_taps(&self, tape: &mut Tape<T>, x: Var) -> Result<Taps> {
        let s = tape.shape(x);
        self.check_input(s.h(), s.w())?;
        if s.c() != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "model",
                dim: "channels",
                expected: self.config.in_channels,
                got: s.c(),
            });
        }
        let mut named = Vec::with_capacity(TAP_NAMES.len());
        let (stem, pyramid) = self.backbone.forward(tape, x)?;
        named.push(("stem", stem));
        for (i, &p) in pyramid.iter().enumerate() {
            named.push((TAP_NAMES[1 + i], p));
        }
        let necks = self.neck.forward(tape, pyramid)?;
        let mut outputs = necks;
        for (i, (&n, head)) in necks.iter().zip(&self.heads).enumerate() {
            named.push((TAP_NAMES[5 + i], n));
            outputs[i] = head.forward(tape, n)?;
        }
        for (i, &o) in outputs.iter().enumerate() {
            named.push((TAP_NAMES[8 + i], o));
        }
        Ok(Taps { named, outputs })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<[Var; 3]> {
        Ok(self.forward_taps(tape, x)?.outputs)
    }

    /// Convenience inference pass on a plain tensor.
    pub fn infer(&self, x: &Tensor<T>, fused: bool) -> Result<[Tensor<T>; 3]> {
        let mut tape = Tape::with_mode(crate::autograd::ForwardMode {
            fused,
            ..Default::default()
        });
        let v = tape.constant(x.clone());
        let out = self.forward(&mut tape, v)?;
        Ok(out.map(|o| tape.value(o).clone()))
    }

    /// Largest depthwise kernel in each backbone stage, P2..P5.
    pub fn backbone_kernels(&self) -> Vec<usize> {
        (0..self.backbone.stages.len())
            .map(|i| max_dw_kernel(&self.inventory(), &format!("backbone.stage{i}.")))
            .collect()
    }

    /// Depthwise kernels used in the neck, one per level, ascending.
    pub fn neck_kernels(&self) -> Vec<usize> {
        let inv = self.inventory();
        let mut ks: Vec<usize> = (3..=5)
            .map(|l| max_dw_kernel(&inv, &format!("neck.p{l}_td.")).max(max_dw_kernel(&inv, &format!("neck.p{l}_bu."))))
            .collect();
        ks.sort_unstable();
        ks
    }

    pub fn costs(&self, input_hw: (usize, usize), fused: bool) -> Result<CostReport> {
        self.check_input(input_hw.0, input_hw.1)?;
        Ok(self.cost_report(input_hw, fused))
    }
}

fn max_dw_kernel(inv: &[LayerInfo], prefix: &str) -> usize {
    inv.iter()
        .filter(|l| l.name.starts_with(prefix) && l.is_depthwise())
        .map(|l| l.kernel)
        .max()
        .unwrap_or(0)
}

impl<T: Scalar> Layer<T> for Model<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        self.backbone.units(&join(prefix, "backbone"), out);
        self.neck.units(&join(prefix, "neck"), out);
        for (i, h) in self.heads.iter().enumerate() {
            h.units(&join(prefix, &format!("head{}", i + 3)), out);
        }
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        self.backbone.units_mut(&join(prefix, "backbone"), out);
        self.neck.units_mut(&join(prefix, "neck"), out);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.units_mut(&join(prefix, &format!("head{}", i + 3)), out);
        }
    }
}

impl<T: Scalar> Costed<T> for Model<T> {
    fn cost(&self, prefix: &str, in_hw: (usize, usize), fused: bool, rows: &mut Vec<CostRow>) -> (usize, usize) {
        self.backbone.cost(&join(prefix, "backbone"), in_hw, fused, rows);
        let p2 = (in_hw.0 / 4, in_hw.1 / 4);
        let n3 = self.neck.cost(&join(prefix, "neck"), p2, fused, rows);
        for (i, h) in self.heads.iter().enumerate() {
            let hw = (n3.0 >> i, n3.1 >> i);
            flat_rows(h, &join(prefix, &format!("head{}", i + 3)), hw, fused, rows);
        }
        (n3.0 >> 2, n3.1 >> 2)
    }
}
