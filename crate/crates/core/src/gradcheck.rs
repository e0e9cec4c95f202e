//! Central finite-difference checks of the recorded gradients.
//!
//! Every check runs in f64. The scalar being differentiated is a weighted sum
//! of the op's output with fixed random weights, so every output element
//! contributes. Per element the relative error is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{ForwardMode, OpKind, Tape, Var};
use crate::blocks::{Bottleneck, BottleneckConfig, HelanStyle};
use crate::error::{Error, Result};
use crate::mafpn::FusionNode;
use crate::nn::Layer;
use crate::ops::ConvSpec;
use crate::tensor::{Shape, Tensor};

/// Names accepted by [`run`]; `"conv2d"` expands to every kernel/groups/stride variant.
pub const CHECK_NAMES: [&str; 13] = [
    "conv2d",
    "batchnorm",
    "batchnorm_train",
    "silu",
    "add",
    "upsample",
    "concat",
    "split",
    "sum",
    "global_avg_pool",
    "softmax_cross_entropy",
    "bottleneck",
    "saf_node",
];

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Elements perturbed per tensor (all of them if the tensor is smaller).
    pub max_elements: usize,
    pub seed: u64,
    /// Backward rule to corrupt, for showing that a broken rule is caught.
    pub corrupt: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-4,
            tol: 1e-4,
            floor: 1e-6,
            max_elements: 48,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub elements: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Tensor holding the worst element.
    pub worst: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tol: f64,
    pub rows: Vec<CheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# central differences, h = {:e}, rel tol = {:e}",
            self.step, self.tol
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<4} {:<36} elements {:>4}  max rel {:.3e}  max abs {:.3e}  ({})",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.elements,
                r.max_rel,
                r.max_abs,
                r.worst
            );
        }
        s
    }
}

/// Runs the named checks in the given order.
pub fn run(names: &[&str], cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if names.is_empty() {
        return Err(Error::config("gradcheck needs at least one op"));
    }
    let mut rows = Vec::new();
    for &name in names {
        match name {
            "all" => {
                for n in CHECK_NAMES {
                    run_one(n, cfg, &mut rows)?;
                }
            }
            n => run_one(n, cfg, &mut rows)?,
        }
    }
    Ok(GradcheckReport {
        step: cfg.step,
        tol: cfg.tol,
        rows,
    })
}

/// Accepts `all` or a comma-separated list.
pub fn parse_names(list: &str) -> Result<Vec<&str>> {
    let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::config("empty op list"));
    }
    for n in &names {
        if *n != "all" && !CHECK_NAMES.contains(n) {
            return Err(Error::config(format!(
                "unknown op '{n}' (expected all or one of {})",
                CHECK_NAMES.join(", ")
            )));
        }
    }
    Ok(names)
}

fn run_one(name: &str, cfg: &GradcheckConfig, rows: &mut Vec<CheckRow>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fxhash(name));
    let row = match name {
        "conv2d" => {
            for k in [1, 3, 7] {
                for dw in [false, true] {
                    for stride in [1, 2] {
                        let c = 3;
                        let spec = if dw {
                            ConvSpec::depthwise(c, k)
                        } else {
                            ConvSpec::new(c, 4, k)
                        }
                        .stride(stride)
                        .bias(true);
                        let inputs = vec![
                            randn(&mut rng, [2, c, 9, 9]),
                            randn(&mut rng, spec.weight_shape()),
                            randn(&mut rng, [1, spec.out_channels, 1, 1]),
                        ];
                        let label = format!("conv2d k{k} {} s{stride}", if dw { "dw" } else { "g1" });
                        rows.push(check_fn(&label, inputs, cfg, move |t, v| {
                            t.conv2d(v[0], v[1], Some(v[2]), &spec)
                        })?);
                    }
                }
            }
            return Ok(());
        }
        "batchnorm" => {
            let mean = randn(&mut rng, [1, 3, 1, 1]).into_data();
            let var: Vec<f64> = randn(&mut rng, [1, 3, 1, 1])
                .data()
                .iter()
                .map(|v| 0.5 + v.abs())
                .collect();
            let inputs = vec![
                randn(&mut rng, [2, 3, 4, 4]),
                randn(&mut rng, [1, 3, 1, 1]),
                randn(&mut rng, [1, 3, 1, 1]),
            ];
            check_fn(name, inputs, cfg, move |t, v| {
                t.batchnorm(v[0], v[1], v[2], &mean, &var, 1e-5)
            })?
        }
        "batchnorm_train" => {
            let inputs = vec![
                randn(&mut rng, [2, 3, 4, 4]),
                randn(&mut rng, [1, 3, 1, 1]),
                randn(&mut rng, [1, 3, 1, 1]),
            ];
            check_fn(name, inputs, cfg, |t, v| {
                t.batchnorm_train(v[0], v[1], v[2], 1e-5, None)
            })?
        }
        "silu" => check_fn(name, vec![randn(&mut rng, [2, 3, 5, 5])], cfg, |t, v| t.silu(v[0]))?,
        "add" => check_fn(
            name,
            vec![randn(&mut rng, [2, 3, 4, 4]), randn(&mut rng, [2, 3, 4, 4])],
            cfg,
            |t, v| t.add(v[0], v[1]),
        )?,
        "upsample" => check_fn(name, vec![randn(&mut rng, [2, 3, 3, 5])], cfg, |t, v| {
            t.upsample_nearest2x(v[0])
        })?,
        "concat" => check_fn(
            name,
            vec![
                randn(&mut rng, [2, 2, 4, 4]),
                randn(&mut rng, [2, 3, 4, 4]),
                randn(&mut rng, [2, 1, 4, 4]),
            ],
            cfg,
            |t, v| t.concat_channels(v),
        )?,
        "split" => check_fn(name, vec![randn(&mut rng, [2, 6, 4, 4])], cfg, |t, v| {
            let parts = t.split_channels(v[0], &[1, 3, 2])?;
            t.concat_channels(&[parts[2], parts[1], parts[0]])
        })?,
        "sum" => check_fn(name, vec![randn(&mut rng, [2, 3, 4, 4])], cfg, |t, v| t.sum(v[0]))?,
        "global_avg_pool" => check_fn(name, vec![randn(&mut rng, [2, 3, 5, 4])], cfg, |t, v| {
            t.global_avg_pool(v[0])
        })?,
        "softmax_cross_entropy" => check_fn(name, vec![randn(&mut rng, [4, 5, 1, 1])], cfg, |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 3, 4, 1])
        })?,
        "bottleneck" => {
            let mut m = Bottleneck::<f64>::new(
                BottleneckConfig {
                    expansion: 2.0,
                    ..BottleneckConfig::new(3, 5)
                },
                &mut rng,
            )?;
            randomize(&mut m, &mut rng);
            let x = Tensor::randn([2, 3, 6, 6], 1.0, &mut rng);
            check_module(name, &mut m, vec![x], cfg, |m, t, v| m.forward(t, v[0]))?
        }
        "saf_node" => {
            let style = HelanStyle {
                n_bottlenecks: 1,
                ..HelanStyle::default()
            };
            let mut node = FusionNode::<f64>::saf(4, 3, 4, 5, Some(4), 6, 5, &style, &mut rng)?;
            randomize(&mut node, &mut rng);
            let inputs = vec![
                Tensor::randn([2, 3, 8, 8], 1.0, &mut rng),
                Tensor::randn([2, 4, 4, 4], 1.0, &mut rng),
                Tensor::randn([2, 5, 2, 2], 1.0, &mut rng),
            ];
            check_module(name, &mut node, inputs, cfg, |m, t, v| m.forward(t, v))?
        }
        other => return Err(Error::config(format!("unknown op '{other}'"))),
    };
    rows.push(row);
    Ok(())
}

fn randn(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn randomize<L: Layer<f64>>(m: &mut L, rng: &mut ChaCha8Rng) {
    m.randomize_bn(rng);
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

struct Worst {
    elements: usize,
    max_rel: f64,
    max_abs: f64,
    worst: String,
}

impl Worst {
    fn new() -> Self {
        Worst {
            elements: 0,
            max_rel: 0.0,
            max_abs: 0.0,
            worst: String::from("-"),
        }
    }

    fn record(&mut self, what: &str, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.elements += 1;
        self.max_abs = self.max_abs.max(abs);
        if rel > self.max_rel || self.worst == "-" {
            self.max_rel = self.max_rel.max(rel);
            self.worst = what.to_string();
        }
    }

    fn finish(self, name: &str, tol: f64) -> CheckRow {
        CheckRow {
            name: name.to_string(),
            elements: self.elements,
            passed: self.max_rel <= tol,
            max_rel: self.max_rel,
            max_abs: self.max_abs,
            worst: self.worst,
        }
    }
}

fn loss_weights(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn picks(n: usize, cfg: &GradcheckConfig, salt: u64) -> Vec<usize> {
    if n <= cfg.max_elements {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(salt));
    let mut v = sample(&mut rng, n, cfg.max_elements).into_vec();
    v.sort_unstable();
    v
}

/// Checks `f` with respect to each of its input tensors.
pub fn check_fn(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    cfg: &GradcheckConfig,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckRow> {
    let eval = |inputs: &[Tensor<f64>],
                w: Option<&Tensor<f64>>,
                grads: bool|
     -> Result<(f64, Tensor<f64>, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        tape.corrupt_backward(cfg.corrupt);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let y = f(&mut tape, &vars)?;
        let w = w.cloned().unwrap_or_else(|| loss_weights(tape.shape(y), cfg.seed));
        let loss = tape.weighted_sum(y, w.clone())?;
        let l = tape.value(loss).data()[0];
        let mut g = Vec::new();
        if grads {
            tape.backward(loss)?;
            g = vars
                .iter()
                .zip(inputs)
                .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
                .collect();
        }
        Ok((l, w, g))
    };
    let (_, w, analytic) = eval(&inputs, None, true)?;
    let mut worst = Worst::new();
    for (i, g) in analytic.iter().enumerate() {
        for j in picks(g.numel(), cfg, i as u64) {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += cfg.step;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= cfg.step;
            let lp = eval(&plus, Some(&w), false)?.0;
            let lm = eval(&minus, Some(&w), false)?.0;
            let numeric = (lp - lm) / (2.0 * cfg.step);
            worst.record(&format!("input{i}[{j}]"), g.data()[j], numeric, cfg.floor);
        }
    }
    Ok(worst.finish(name, cfg.tol))
}

type Evaluated = (f64, Tensor<f64>, Tape<f64>, Vec<Var>);

/// Checks a module with respect to its inputs and every learnable parameter,
/// with BN in training mode.
pub fn check_module<M: Layer<f64>>(
    name: &str,
    module: &mut M,
    inputs: Vec<Tensor<f64>>,
    cfg: &GradcheckConfig,
    f: impl Fn(&M, &mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckRow> {
    let mode = ForwardMode {
        batch_stats: true,
        ..Default::default()
    };
    let eval = |m: &M, inputs: &[Tensor<f64>], w: Option<&Tensor<f64>>, grads: bool| -> Result<Evaluated> {
        let mut tape = Tape::with_mode(mode);
        tape.corrupt_backward(cfg.corrupt);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let y = f(m, &mut tape, &vars)?;
        let w = w.cloned().unwrap_or_else(|| loss_weights(tape.shape(y), cfg.seed));
        let loss = tape.weighted_sum(y, w.clone())?;
        let l = tape.value(loss).data()[0];
        if grads {
            tape.backward(loss)?;
        }
        Ok((l, w, tape, vars))
    };
    let (_, w, tape, vars) = eval(module, &inputs, None, true)?;
    let mut worst = Worst::new();

    for (i, &v) in vars.iter().enumerate() {
        let g = tape
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in picks(g.numel(), cfg, i as u64) {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += cfg.step;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= cfg.step;
            let numeric =
                (eval(module, &plus, Some(&w), false)?.0 - eval(module, &minus, Some(&w), false)?.0) / (2.0 * cfg.step);
            worst.record(&format!("input{i}[{j}]"), g.data()[j], numeric, cfg.floor);
        }
    }

    let mut params = Vec::new();
    module.visit(&mut |pname, p| {
        if p.learnable {
            let g = tape
                .param_grad(p.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            params.push((pname.to_string(), g));
        }
    });
    for (k, (pname, g)) in params.iter().enumerate() {
        for j in picks(g.numel(), cfg, 1000 + k as u64) {
            let at = |m: &mut M, delta: f64| {
                m.visit_mut(&mut |n, p| {
                    if n == pname {
                        p.value.data_mut()[j] += delta;
                    }
                })
            };
            at(module, cfg.step);
            let lp = eval(module, &inputs, Some(&w), false)?.0;
            at(module, -2.0 * cfg.step);
            let lm = eval(module, &inputs, Some(&w), false)?.0;
            at(module, cfg.step);
            let numeric = (lp - lm) / (2.0 * cfg.step);
            worst.record(&format!("{pname}[{j}]"), g.data()[j], numeric, cfg.floor);
        }
    }
    Ok(worst.finish(name, cfg.tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rejects_empty_and_unknown() {
        assert!(parse_names("").is_err());
        assert!(parse_names(" , ").is_err());
        assert!(parse_names("silu,nope").is_err());
        assert_eq!(parse_names("silu, add").unwrap(), vec!["silu", "add"]);
        assert!(run(&[], &GradcheckConfig::default()).is_err());
    }

    #[test]
    fn cheap_ops_pass() {
        let r = run(
            &["silu", "add", "upsample", "concat", "split"],
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed(), "{}", r.table());
    }

    #[test]
    fn corrupted_rule_is_named() {
        let cfg = GradcheckConfig {
            corrupt: Some(OpKind::Silu),
            ..Default::default()
        };
        let r = run(&["silu", "add"], &cfg).unwrap();
        assert_eq!(r.failures(), vec!["silu"]);
    }
}
