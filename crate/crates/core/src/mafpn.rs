//! Two-pathway multi-branch auxiliary FPN neck.
//!
//! The first (top-down) pathway fuses each level with a downsampled
//! shallower backbone tap (SAF). The second (bottom-up) pathway fuses four
//! equal-width lanes taken from both pathways (AAF). Both are built from the
//! same [`FusionNode`]: a list of lanes, a channel concat, and a HELAN block.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::blocks::{Helan, HelanStyle};
use crate::error::{Error, Result};
use crate::nn::{ConvBn, Layer, Unit, UnitMut};
use crate::ops::ConvSpec;
use crate::tensor::{join, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckConfig {
    /// Lane widths for levels 3, 4, 5 (shared by both pathways).
    pub widths: [usize; 3],
    /// Depthwise kernels for levels 3, 4, 5.
    #[serde(default = "default_kernels")]
    pub kernels: [usize; 3],
    /// Assist-lane width as a fraction of the same-level backbone width.
    #[serde(default = "default_ratio")]
    pub saf_ratio: f64,
    #[serde(default = "yes")]
    pub enable_saf: bool,
    #[serde(default = "yes")]
    pub enable_aaf: bool,
    #[serde(default)]
    pub block: HelanStyle,
}

fn default_kernels() -> [usize; 3] {
    [5, 7, 9]
}

fn default_ratio() -> f64 {
    0.5
}

fn yes() -> bool {
    true
}

impl Default for NeckConfig {
    fn default() -> Self {
        NeckConfig {
            widths: [96, 192, 256],
            kernels: default_kernels(),
            saf_ratio: default_ratio(),
            enable_saf: true,
            enable_aaf: true,
            block: HelanStyle::default(),
        }
    }
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::config("neck.widths: every width must be positive"));
        }
        if !(self.saf_ratio > 0.0 && self.saf_ratio <= 1.0) {
            return Err(Error::config(format!(
                "neck.saf_ratio: {} is outside (0, 1]",
                self.saf_ratio
            )));
        }
        if self.kernels.iter().any(|&k| k < 3 || k % 2 == 0) {
            return Err(Error::config(format!(
                "neck.kernels: {:?} must be odd sizes >= 3",
                self.kernels
            )));
        }
        self.block
            .validate()
            .map_err(|e| Error::config(format!("neck.block: {e}")))
    }

    fn width(&self, level: u8) -> usize {
        self.widths[level as usize - 3]
    }

    fn kernel(&self, level: u8) -> usize {
        self.kernels[level as usize - 3]
    }
}

/// A feature map position in the pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    /// Backbone tap `P2..P5`.
    Backbone(u8),
    /// First-pathway lane `P'3..P'5`.
    TopDown(u8),
    /// Second-pathway lane `P''3..P''5`.
    BottomUp(u8),
}

impl Source {
    pub fn level(self) -> u8 {
        match self {
            Source::Backbone(l) | Source::TopDown(l) | Source::BottomUp(l) => l,
        }
    }

    pub(crate) fn ident(self) -> String {
        match self {
            Source::Backbone(l) => format!("p{l}"),
            Source::TopDown(l) => format!("p{l}_td"),
            Source::BottomUp(l) => format!("p{l}_bu"),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Backbone(l) => write!(f, "P{l}"),
            Source::TopDown(l) => write!(f, "P'{l}"),
            Source::BottomUp(l) => write!(f, "P''{l}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaneKind {
    /// 1x1 projection of a backbone tap (top level of the first pathway).
    Project,
    /// Downsampled shallower backbone tap.
    Assist,
    /// Same-level input passed through unchanged.
    Lateral,
    /// Deeper first-pathway lane, upsampled.
    Upsample,
    /// Deeper first-pathway lane, upsampled and projected (second pathway).
    CrossUp,
    /// Shallower first-pathway lane, downsampled (second pathway).
    CrossDown,
    /// Shallower second-pathway lane, downsampled.
    BottomUp,
}

impl LaneKind {
    pub fn name(self) -> &'static str {
        match self {
            LaneKind::Project => "project",
            LaneKind::Assist => "assist",
            LaneKind::Lateral => "lateral",
            LaneKind::Upsample => "upsample",
            LaneKind::CrossUp => "cross-up",
            LaneKind::CrossDown => "cross-down",
            LaneKind::BottomUp => "bottom-up",
        }
    }
}

/// What a lane does to its source before the concat.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum LaneOp<T: Scalar> {
    Identity,
    /// Nearest-neighbour x2.
    Up,
    /// `C(U(x))`: upsample, then 1x1 conv + BN.
    UpProject(ConvBn<T>),
    /// `silu(C(Down(x)))`: 3x3 stride-2 conv + BN, then 1x1 conv + BN + SiLU.
    DownProject {
        down: ConvBn<T>,
        proj: ConvBn<T>,
    },
    /// `silu(C(x))`.
    Project(ConvBn<T>),
}

#[derive(Clone, Debug)]
pub struct Lane<T: Scalar = f32> {
    pub source: Source,
    pub kind: LaneKind,
    pub op: LaneOp<T>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<T: Scalar> Lane<T> {
    fn new(source: Source, kind: LaneKind, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let op = match kind {
            LaneKind::Lateral => LaneOp::Identity,
            LaneKind::Upsample => LaneOp::Up,
            LaneKind::CrossUp => LaneOp::UpProject(ConvBn::new(ConvSpec::new(c_in, c_out, 1), false, rng)?),
            LaneKind::Project => LaneOp::Project(ConvBn::new(ConvSpec::new(c_in, c_out, 1), true, rng)?),
            LaneKind::Assist | LaneKind::CrossDown | LaneKind::BottomUp => LaneOp::DownProject {
                down: ConvBn::new(ConvSpec::new(c_in, c_in, 3).stride(2), false, rng)?,
                proj: ConvBn::new(ConvSpec::new(c_in, c_out, 1), true, rng)?,
            },
        };
        let out_channels = match op {
            LaneOp::Identity | LaneOp::Up => c_in,
            _ => c_out,
        };
        Ok(Lane {
            source,
            kind,
            op,
            in_channels: c_in,
            out_channels,
        })
    }

    /// Source spatial size this lane needs to land on `target`.
    fn expected_source(&self, target: (usize, usize)) -> (usize, usize) {
        match self.op {
            LaneOp::Identity | LaneOp::Project(_) => target,
            LaneOp::Up | LaneOp::UpProject(_) => (target.0 / 2, target.1 / 2),
            LaneOp::DownProject { .. } => (target.0 * 2, target.1 * 2),
        }
    }

    fn resamples(&self) -> i32 {
        match self.op {
            LaneOp::Identity | LaneOp::Project(_) => 0,
            LaneOp::Up | LaneOp::UpProject(_) => 1,
            LaneOp::DownProject { .. } => -1,
        }
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match &self.op {
            LaneOp::Identity => Ok(x),
            LaneOp::Up => tape.upsample_nearest2x(x),
            LaneOp::UpProject(c) => {
                let u = tape.upsample_nearest2x(x)?;
                c.forward(tape, u)
            }
            LaneOp::DownProject { down, proj } => {
                let d = down.forward(tape, x)?;
                proj.forward(tape, d)
            }
            LaneOp::Project(c) => c.forward(tape, x),
        }
    }

    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        match &self.op {
            LaneOp::Identity | LaneOp::Up => {}
            LaneOp::UpProject(c) | LaneOp::Project(c) => out.push((join(prefix, "proj"), Unit::ConvBn(c))),
            LaneOp::DownProject { down, proj } => {
                out.push((join(prefix, "down"), Unit::ConvBn(down)));
                out.push((join(prefix, "proj"), Unit::ConvBn(proj)));
            }
        }
    }

    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        match &mut self.op {
            LaneOp::Identity | LaneOp::Up => {}
            LaneOp::UpProject(c) | LaneOp::Project(c) => out.push((join(prefix, "proj"), UnitMut::ConvBn(c))),
            LaneOp::DownProject { down, proj } => {
                out.push((join(prefix, "down"), UnitMut::ConvBn(down)));
                out.push((join(prefix, "proj"), UnitMut::ConvBn(proj)));
            }
        }
    }
}

/// Concat of several lanes at one level, followed by a HELAN block (absent
/// for the plain projection at the top of the first pathway).
#[derive(Clone, Debug)]
pub struct FusionNode<T: Scalar = f32> {
    pub target: Source,
    pub lanes: Vec<Lane<T>>,
    pub helan: Option<Helan<T>>,
}

impl<T: Scalar> FusionNode<T> {
    fn new(
        target: Source,
        lanes: Vec<Lane<T>>,
        out: usize,
        kernel: Option<usize>,
        style: &HelanStyle,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let helan = match kernel {
            Some(k) => Some(Helan::new(style.config(Self::width_of(&lanes), out, k), rng)?),
            None => None,
        };
        Ok(FusionNode { target, lanes, helan })
    }

    /// Superficial assisted fusion at `level`:
    /// `concat(silu(C(Down(P[level-1]))), P[level], U(P'[level+1]))`.
    #[allow(clippy::too_many_arguments)]
    pub fn saf(
        level: u8,
        shallow: usize,
        same: usize,
        deep: usize,
        assist: Option<usize>,
        out: usize,
        kernel: usize,
        style: &HelanStyle,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut lanes = Vec::new();
        if let Some(a) = assist {
            lanes.push(Lane::new(
                Source::Backbone(level - 1),
                LaneKind::Assist,
                shallow,
                a,
                rng,
            )?);
        }
        lanes.push(Lane::new(Source::Backbone(level), LaneKind::Lateral, same, same, rng)?);
        lanes.push(Lane::new(
            Source::TopDown(level + 1),
            LaneKind::Upsample,
            deep,
            deep,
            rng,
        )?);
        Self::new(Source::TopDown(level), lanes, out, Some(kernel), style, rng)
    }

    /// Advanced assisted fusion at `level`: up to four lanes of width `w`,
    /// `concat(silu(C(Down(P'[l-1]))), silu(C(Down(P''[l-1]))), P'[l], C(U(P'[l+1])))`.
    /// `None` widths drop a lane; the lane feeding from below always exists.
    #[allow(clippy::too_many_arguments)]
    pub fn aaf(
        level: u8,
        cross_down: Option<usize>,
        bottom_up: (Source, usize),
        same: usize,
        cross_up: Option<usize>,
        w: usize,
        kernel: usize,
        style: &HelanStyle,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut lanes = Vec::new();
        if let Some(c) = cross_down {
            lanes.push(Lane::new(Source::TopDown(level - 1), LaneKind::CrossDown, c, w, rng)?);
        }
        let kind = match bottom_up.0 {
            Source::Backbone(_) => LaneKind::Assist,
            _ => LaneKind::BottomUp,
        };
        lanes.push(Lane::new(bottom_up.0, kind, bottom_up.1, w, rng)?);
        lanes.push(Lane::new(Source::TopDown(level), LaneKind::Lateral, same, same, rng)?);
        if let Some(c) = cross_up {
            lanes.push(Lane::new(Source::TopDown(level + 1), LaneKind::CrossUp, c, w, rng)?);
        }
        Self::new(Source::BottomUp(level), lanes, w, Some(kernel), style, rng)
    }

    fn width_of(lanes: &[Lane<T>]) -> usize {
        lanes.iter().map(|l| l.out_channels).sum()
    }

    pub fn concat_width(&self) -> usize {
        Self::width_of(&self.lanes)
    }

    pub fn out_channels(&self) -> usize {
        match &self.helan {
            Some(h) => h.config.out_channels,
            None => self.concat_width(),
        }
    }

    fn target_hw(&self, tape: &Tape<T>, inputs: &[Var]) -> (usize, usize) {
        let i = self
            .lanes
            .iter()
            .position(|l| l.resamples() == 0)
            .expect("every node has a same-level lane");
        tape.shape(inputs[i]).spatial()
    }

    /// Runs every lane and concatenates, in lane order. `inputs[i]` feeds
    /// `lanes[i]`.
    pub fn fuse(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.lanes.len() {
            return Err(Error::config(format!(
                "{} expects {} inputs, got {}",
                self.target,
                self.lanes.len(),
                inputs.len()
            )));
        }
        let target = self.target_hw(tape, inputs);
        for (lane, &x) in self.lanes.iter().zip(inputs) {
            let s = tape.shape(x);
            let expected = lane.expected_source(target);
            if s.spatial() != expected || (lane.resamples() > 0 && expected.0 * 2 != target.0) {
                return Err(Error::Spatial {
                    level: self.target.to_string(),
                    lane: format!("{} from {}", lane.kind.name(), lane.source),
                    expected,
                    got: s.spatial(),
                });
            }
            if s.c() != lane.in_channels {
                return Err(Error::ShapeMismatch {
                    op: "fusion lane",
                    dim: "channels",
                    expected: lane.in_channels,
                    got: s.c(),
                });
            }
        }
        let outs = self
            .lanes
            .iter()
            .zip(inputs)
            .map(|(lane, &x)| lane.forward(tape, x))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        tape.concat_channels(&outs)
    }

    pub fn forward(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let cat = self.fuse(tape, inputs)?;
        match &self.helan {
            Some(h) => h.forward(tape, cat),
            None => Ok(cat),
        }
    }
}

impl<T: Scalar> Layer<T> for FusionNode<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        for (i, lane) in self.lanes.iter().enumerate() {
            lane.units(&join(prefix, &format!("lane{i}")), out);
        }
        if let Some(h) = &self.helan {
            h.units(&join(prefix, "helan"), out);
        }
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        for (i, lane) in self.lanes.iter_mut().enumerate() {
            lane.units_mut(&join(prefix, &format!("lane{i}")), out);
        }
        if let Some(h) = &mut self.helan {
            h.units_mut(&join(prefix, "helan"), out);
        }
    }
}

/// One line of the wiring dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub kind: &'static str,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {} [{}]", self.src, self.dst, self.kind)
    }
}

#[derive(Clone, Debug)]
pub struct Mafpn<T: Scalar = f32> {
    pub config: NeckConfig,
    /// Widths of P2..P5.
    pub backbone_widths: [usize; 4],
    /// Nodes in evaluation order.
    pub nodes: Vec<FusionNode<T>>,
    /// Where N3, N4, N5 are read from.
    pub outputs: [Source; 3],
}

impl<T: Scalar> Mafpn<T> {
    pub fn new(config: NeckConfig, backbone_widths: [usize; 4], rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if backbone_widths.contains(&0) {
            return Err(Error::config("backbone widths must be positive"));
        }
        let bb = |l: u8| backbone_widths[l as usize - 2];
        let w = |l: u8| config.width(l);
        let k = |l: u8| config.kernel(l);
        let style = &config.block;
        let assist = |l: u8| {
            config
                .enable_saf
                .then(|| ((bb(l) as f64 * config.saf_ratio).round() as usize).max(1))
        };
        let aaf = config.enable_aaf;
        let mut nodes = Vec::new();

        let top = Lane::new(Source::Backbone(5), LaneKind::Project, bb(5), w(5), rng)?;
        nodes.push(FusionNode::new(Source::TopDown(5), vec![top], w(5), None, style, rng)?);
        for l in [4u8, 3] {
            nodes.push(FusionNode::saf(
                l,
                bb(l - 1),
                bb(l),
                w(l + 1),
                assist(l),
                w(l),
                k(l),
                style,
                rng,
            )?);
        }

        // Lowest second-pathway level: no shallower neck lanes exist, so the
        // backbone P2 stands in for them and P'4 arrives through C(U(.)).
        let n3 = if aaf {
            let mut lanes = Vec::new();
            if config.enable_saf {
                lanes.push(Lane::new(Source::Backbone(2), LaneKind::Assist, bb(2), w(3), rng)?);
            }
            lanes.push(Lane::new(Source::TopDown(3), LaneKind::Lateral, w(3), w(3), rng)?);
            lanes.push(Lane::new(Source::TopDown(4), LaneKind::CrossUp, w(4), w(3), rng)?);
            nodes.push(FusionNode::new(
                Source::BottomUp(3),
                lanes,
                w(3),
                Some(k(3)),
                style,
                rng,
            )?);
            Source::BottomUp(3)
        } else {
            Source::TopDown(3)
        };
        nodes.push(FusionNode::aaf(
            4,
            aaf.then(|| w(3)),
            (n3, w(3)),
            w(4),
            aaf.then(|| w(5)),
            w(4),
            k(4),
            style,
            rng,
        )?);
        // Highest level: no deeper lane.
        nodes.push(FusionNode::aaf(
            5,
            aaf.then(|| w(4)),
            (Source::BottomUp(4), w(4)),
            w(5),
            None,
            w(5),
            k(5),
            style,
            rng,
        )?);

        Ok(Mafpn {
            config,
            backbone_widths,
            nodes,
            outputs: [n3, Source::BottomUp(4), Source::BottomUp(5)],
        })
    }

    /// `taps` are P2..P5. Returns N3, N4, N5.
    pub fn forward(&self, tape: &mut Tape<T>, taps: [Var; 4]) -> Result<[Var; 3]> {
        Ok(self.forward_all(tape, taps)?.1)
    }

    /// Like [`forward`](Self::forward) but also returns every intermediate lane.
    pub fn forward_all(&self, tape: &mut Tape<T>, taps: [Var; 4]) -> Result<(HashMap<Source, Var>, [Var; 3])> {
        self.check_taps(tape, &taps)?;
        let mut env: HashMap<Source, Var> = (2u8..=5).map(|l| (Source::Backbone(l), taps[l as usize - 2])).collect();
        for node in &self.nodes {
            let inputs: Vec<Var> = node.lanes.iter().map(|l| env[&l.source]).collect();
            let y = node.forward(tape, &inputs)?;
            env.insert(node.target, y);
        }
        let outs = self.outputs.map(|s| env[&s]);
        Ok((env, outs))
    }

    fn check_taps(&self, tape: &Tape<T>, taps: &[Var; 4]) -> Result<()> {
        let (h5, w5) = tape.shape(taps[3]).spatial();
        for (i, &t) in taps.iter().enumerate() {
            let s = tape.shape(t);
            let scale = 1 << (3 - i);
            let expected = (h5 * scale, w5 * scale);
            if s.spatial() != expected || h5 == 0 || w5 == 0 {
                return Err(Error::Spatial {
                    level: format!("P{}", i + 2),
                    lane: "backbone tap".into(),
                    expected,
                    got: s.spatial(),
                });
            }
            if s.c() != self.backbone_widths[i] {
                return Err(Error::ShapeMismatch {
                    op: "mafpn",
                    dim: "channels",
                    expected: self.backbone_widths[i],
                    got: s.c(),
                });
            }
        }
        Ok(())
    }

    pub fn node(&self, target: Source) -> Option<&FusionNode<T>> {
        self.nodes.iter().find(|n| n.target == target)
    }

    /// Deterministic edge list, one lane per line, then the three outputs.
    pub fn wiring(&self) -> Vec<Edge> {
        let mut edges = Vec::new();
        for node in &self.nodes {
            for lane in &node.lanes {
                edges.push(Edge {
                    src: lane.source.to_string(),
                    dst: node.target.to_string(),
                    kind: lane.kind.name(),
                });
            }
        }
        for (i, s) in self.outputs.iter().enumerate() {
            edges.push(Edge {
                src: s.to_string(),
                dst: format!("N{}", i + 3),
                kind: "output",
            });
        }
        edges
    }

    pub fn wiring_text(&self) -> String {
        self.wiring().iter().map(|e| format!("{e}\n")).collect()
    }

    /// Backbone levels that can influence each output, found by propagating
    /// level tags along the wiring graph.
    pub fn lineage(&self) -> [BTreeSet<u8>; 3] {
        let mut taint: HashMap<Source, BTreeSet<u8>> =
            (2u8..=5).map(|l| (Source::Backbone(l), BTreeSet::from([l]))).collect();
        for node in &self.nodes {
            let mut set = BTreeSet::new();
            for lane in &node.lanes {
                set.extend(taint[&lane.source].iter().copied());
            }
            taint.insert(node.target, set);
        }
        self.outputs.map(|s| taint[&s].clone())
    }

    /// Distinct depthwise kernel sizes used by the neck's HELAN blocks, ascending.
    pub fn kernels(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .nodes
            .iter()
            .filter_map(|n| n.helan.as_ref().map(|h| h.kernel()))
            .collect();
        set.into_iter().collect()
    }

    pub fn out_widths(&self) -> [usize; 3] {
        self.outputs
            .map(|s| self.node(s).map(|n| n.out_channels()).unwrap_or(0))
    }
}

impl<T: Scalar> Layer<T> for Mafpn<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        for n in &self.nodes {
            n.units(&join(prefix, &n.target.ident()), out);
        }
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        for n in &mut self.nodes {
            let name = join(prefix, &n.target.ident());
            n.units_mut(&name, out);
        }
    }
}
