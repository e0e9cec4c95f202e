//! Parameter and multiply-accumulate accounting by shape propagation.
//!
//! Conventions: a convolution has `(in/groups)*out*k^2` weights plus `out`
//! bias terms, and costs `weights * H_out * W_out` MACs. BN contributes `2C`
//! learnable parameters and `2C` running-statistic buffers, and no MACs.
//! FLOPs are reported as `2 * MACs`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::blocks::Helan;
use crate::mafpn::{FusionNode, LaneOp, Mafpn, Source};
use crate::nn::{Layer, Unit};
use crate::ops::ConvSpec;
use crate::tensor::{join, Scalar};

pub const FLOP_CONVENTION: &str = "FLOPs = 2 x MACs";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    /// Non-learnable entries (BN running statistics).
    pub buffers: u64,
    pub macs: u64,
    /// `[C, H, W]` of the row's output.
    pub output: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub input_hw: (usize, usize),
    pub fused: bool,
    pub convention: &'static str,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_buffers: u64,
    pub total_macs: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn from_rows(input_hw: (usize, usize), fused: bool, rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_buffers = rows.iter().map(|r| r.buffers).sum();
        let total_macs: u64 = rows.iter().map(|r| r.macs).sum();
        CostReport {
            input_hw,
            fused,
            convention: FLOP_CONVENTION,
            rows,
            total_params,
            total_buffers,
            total_macs,
            total_flops: 2 * total_macs,
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let mode = if self.fused { "fused" } else { "train" };
        let _ = writeln!(
            s,
            "# {mode} graph at {}x{}; {}",
            self.input_hw.0, self.input_hw.1, self.convention
        );
        let _ = writeln!(
            s,
            "{:<48} {:<8} {:>10} {:>14} {:>16}",
            "layer", "kind", "params", "MACs", "output"
        );
        for r in &self.rows {
            let out = format!("{}x{}x{}", r.output[0], r.output[1], r.output[2]);
            let _ = writeln!(
                s,
                "{:<48} {:<8} {:>10} {:>14} {:>16}",
                r.name, r.kind, r.params, r.macs, out
            );
        }
        let _ = writeln!(
            s,
            "total: params {} ({:.3}M), buffers {}, MACs {}, FLOPs {} ({:.3}G)",
            self.total_params,
            self.total_params as f64 / 1e6,
            self.total_buffers,
            self.total_macs,
            self.total_flops,
            self.total_flops as f64 / 1e9
        );
        s
    }
}

/// Row for one convolution applied to an `in_hw` input.
pub fn conv_row(name: String, spec: &ConvSpec, in_hw: (usize, usize)) -> CostRow {
    let (h, w) = out_hw(spec, in_hw);
    let weights = (spec.in_channels / spec.groups * spec.out_channels * spec.kernel * spec.kernel) as u64;
    let bias = if spec.has_bias { spec.out_channels as u64 } else { 0 };
    CostRow {
        name,
        kind: if spec.is_depthwise() { "dwconv" } else { "conv" },
        params: weights + bias,
        buffers: 0,
        macs: weights * (h * w) as u64,
        output: [spec.out_channels, h, w],
    }
}

pub fn bn_row(name: String, channels: usize, hw: (usize, usize)) -> CostRow {
    CostRow {
        name,
        kind: "bn",
        params: 2 * channels as u64,
        buffers: 2 * channels as u64,
        macs: 0,
        output: [channels, hw.0, hw.1],
    }
}

fn out_hw(spec: &ConvSpec, (h, w): (usize, usize)) -> (usize, usize) {
    let o = |n: usize| (n + 2 * spec.padding).saturating_sub(spec.kernel) / spec.stride + 1;
    (o(h), o(w))
}

/// Rows for one unit; returns the unit's output spatial size.
pub fn unit_rows<T: Scalar>(
    name: &str,
    unit: &Unit<'_, T>,
    in_hw: (usize, usize),
    fused: bool,
    rows: &mut Vec<CostRow>,
) -> (usize, usize) {
    match unit {
        Unit::Conv(c) => {
            rows.push(conv_row(name.to_string(), &c.spec, in_hw));
            out_hw(&c.spec, in_hw)
        }
        Unit::ConvBn(u) => {
            let spec = u.conv.spec;
            if fused {
                rows.push(conv_row(join(name, "fused"), &spec.bias(true), in_hw));
            } else {
                rows.push(conv_row(join(name, "conv"), &spec, in_hw));
                rows.push(bn_row(join(name, "bn"), spec.out_channels, out_hw(&spec, in_hw)));
            }
            out_hw(&spec, in_hw)
        }
        Unit::Rep(r) => {
            if fused {
                let spec = ConvSpec::depthwise(r.channels, r.large_kernel).bias(true);
                rows.push(conv_row(join(name, "fused"), &spec, in_hw));
            } else {
                for (i, b) in r.branches.iter().enumerate() {
                    let p = join(name, &format!("branch{i}"));
                    rows.push(conv_row(p.clone(), &ConvSpec::depthwise(r.channels, b.kernel), in_hw));
                    rows.push(bn_row(join(&p, "bn"), r.channels, in_hw));
                }
            }
            in_hw
        }
    }
}

/// Cost accounting for a component whose input resolution is known.
pub trait Costed<T: Scalar> {
    /// Appends rows and returns the output spatial size.
    fn cost(&self, prefix: &str, in_hw: (usize, usize), fused: bool, rows: &mut Vec<CostRow>) -> (usize, usize);

    fn cost_report(&self, in_hw: (usize, usize), fused: bool) -> CostReport {
        let mut rows = Vec::new();
        self.cost("", in_hw, fused, &mut rows);
        CostReport::from_rows(in_hw, fused, rows)
    }
}

/// Every unit of a stride-1 layer sees the same resolution.
pub fn flat_rows<T: Scalar, L: Layer<T> + ?Sized>(
    layer: &L,
    prefix: &str,
    hw: (usize, usize),
    fused: bool,
    rows: &mut Vec<CostRow>,
) {
    let mut units = Vec::new();
    layer.units(prefix, &mut units);
    for (name, u) in &units {
        unit_rows(name, u, hw, fused, rows);
    }
}

impl<T: Scalar> Costed<T> for Helan<T> {
    fn cost(&self, prefix: &str, hw: (usize, usize), fused: bool, rows: &mut Vec<CostRow>) -> (usize, usize) {
        flat_rows(self, prefix, hw, fused, rows);
        hw
    }
}

impl<T: Scalar> FusionNode<T> {
    /// `target_hw` is the node's own resolution; lane sources are derived from it.
    pub fn cost_at(&self, prefix: &str, target_hw: (usize, usize), fused: bool, rows: &mut Vec<CostRow>) {
        for (i, lane) in self.lanes.iter().enumerate() {
            let p = join(prefix, &format!("lane{i}"));
            match &lane.op {
                LaneOp::Identity | LaneOp::Up => {}
                LaneOp::UpProject(c) | LaneOp::Project(c) => {
                    unit_rows(&join(&p, "proj"), &Unit::ConvBn(c), target_hw, fused, rows);
                }
                LaneOp::DownProject { down, proj } => {
                    let src = (target_hw.0 * 2, target_hw.1 * 2);
                    let hw = unit_rows(&join(&p, "down"), &Unit::ConvBn(down), src, fused, rows);
                    unit_rows(&join(&p, "proj"), &Unit::ConvBn(proj), hw, fused, rows);
                }
            }
        }
        if let Some(h) = &self.helan {
            h.cost(&join(prefix, "helan"), target_hw, fused, rows);
        }
    }
}

impl<T: Scalar> Costed<T> for Mafpn<T> {
    /// `in_hw` is the P2 resolution; returns the N3 resolution.
    fn cost(&self, prefix: &str, p2_hw: (usize, usize), fused: bool, rows: &mut Vec<CostRow>) -> (usize, usize) {
        let at = |s: Source| {
            let shift = s.level() - 2;
            (p2_hw.0 >> shift, p2_hw.1 >> shift)
        };
        for node in &self.nodes {
            let p = join(prefix, &node.target.ident());
            node.cost_at(&p, at(node.target), fused, rows);
        }
        at(Source::TopDown(3))
    }
}
