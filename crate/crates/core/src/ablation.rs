//! Toggle grids over the block and neck options, reported as size and cost.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Layer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// ELAN aggregation, large kernels and RepHDW branches in every block.
    Block,
    /// SAF and AAF fusion in the neck.
    Neck,
    /// Cumulative: fusion neck, then RepHELAN blocks, then the kernel schedule.
    Components,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Block, Preset::Neck, Preset::Components];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Block => "block",
            Preset::Neck => "neck",
            Preset::Components => "components",
        }
    }

    pub fn toggles(self) -> &'static [&'static str] {
        match self {
            Preset::Block => &["elan", "large_kernel", "rep"],
            Preset::Neck => &["saf", "aaf"],
            Preset::Components => &["mafpn", "rephelan", "kernel_schedule"],
        }
    }

    /// Toggle states, one row per entry.
    pub fn grid(self) -> Vec<Vec<bool>> {
        let rows: &[&[bool]] = match self {
            Preset::Block => &[
                &[false, false, false],
                &[true, false, false],
                &[true, false, true],
                &[true, true, false],
                &[false, true, true],
                &[true, true, true],
            ],
            Preset::Neck => &[&[false, false], &[true, false], &[false, true], &[true, true]],
            Preset::Components => &[
                &[false, false, false],
                &[true, false, false],
                &[true, true, false],
                &[true, true, true],
            ],
        };
        rows.iter().map(|r| r.to_vec()).collect()
    }

    /// `base` with one row's toggles applied.
    pub fn apply(self, base: &ModelConfig, on: &[bool]) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Preset::Block => {
                for style in [&mut cfg.block, &mut cfg.neck.block] {
                    style.use_elan = on[0];
                    style.use_large = on[1];
                    style.use_rep = on[2];
                }
            }
            Preset::Neck => {
                cfg.neck.enable_saf = on[0];
                cfg.neck.enable_aaf = on[1];
            }
            Preset::Components => {
                cfg.neck.enable_saf = on[0];
                cfg.neck.enable_aaf = on[0];
                for style in [&mut cfg.block, &mut cfg.neck.block] {
                    style.use_elan = on[1];
                    style.use_rep = on[1];
                    style.use_large = on[2];
                }
            }
        }
        cfg
    }
}

impl FromStr for Preset {
    type Err = Error;

    /// Also accepts `table2`, `table3` and `table5`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" | "table2" => Ok(Preset::Block),
            "neck" | "table3" => Ok(Preset::Neck),
            "components" | "table5" => Ok(Preset::Components),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected block|neck|components or table2|table3|table5)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub toggles: Vec<(String, bool)>,
    pub params: u64,
    pub fused_params: u64,
    pub flops: u64,
    pub fused_flops: u64,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let on: Vec<&str> = self.toggles.iter().filter(|t| t.1).map(|t| t.0.as_str()).collect();
        if on.is_empty() {
            "(none)".to_string()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub preset: Preset,
    pub input_hw: (usize, usize),
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# preset {} at {}x{}; FLOPs = 2 x MACs",
            self.preset.name(),
            self.input_hw.0,
            self.input_hw.1
        );
        let mut head = String::new();
        for t in self.preset.toggles() {
            let _ = write!(head, "{t:>16}");
        }
        let _ = writeln!(
            s,
            "{head} {:>12} {:>12} {:>10} {:>10}",
            "params", "fused", "GFLOPs", "fused"
        );
        for r in &self.rows {
            let mut line = String::new();
            for (_, on) in &r.toggles {
                let _ = write!(line, "{:>16}", if *on { "x" } else { "-" });
            }
            let _ = writeln!(
                s,
                "{line} {:>12} {:>12} {:>10.3} {:>10.3}",
                r.params,
                r.fused_params,
                r.flops as f64 / 1e9,
                r.fused_flops as f64 / 1e9
            );
        }
        s
    }
}

/// Builds every row of `preset` on top of `base` and counts it.
pub fn run(preset: Preset, base: &ModelConfig, input_hw: (usize, usize)) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for on in preset.grid() {
        let cfg = preset.apply(base, &on);
        let model = Model::<f32>::build(&cfg)?;
        let train = model.costs(input_hw, false)?;
        let fused = model.costs(input_hw, true)?;
        debug_assert_eq!(train.total_params as usize, model.param_count());
        rows.push(AblationRow {
            toggles: preset
                .toggles()
                .iter()
                .zip(&on)
                .map(|(n, &b)| (n.to_string(), b))
                .collect(),
            params: train.total_params,
            fused_params: fused.total_params,
            flops: train.total_flops,
            fused_flops: fused.total_flops,
        });
    }
    Ok(AblationReport { preset, input_hw, rows })
}
