//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::time::{Duration, Instant};

use mafyolo::ablation::{self, Preset};
use mafyolo::cost::{conv_row, unit_rows};
use mafyolo::erf::{erf_map, erf_radius, DwStack};
use mafyolo::gradcheck::{self, GradcheckConfig};
use mafyolo::model::{Model, ModelConfig};
use mafyolo::nn::{Layer, Unit};
use mafyolo::ops::ConvSpec;
use mafyolo::rep_conv::RepHDWConv;
use mafyolo::tensor::Tensor;
use mafyolo::train::{self, Dataset, ToyClassifier, ToyConfig};
use mafyolo::{verify, weights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

fn fusion_equivalence() -> Outcome {
    let channels = [1, 8, 32];
    let kernels = [5, 7, 9];
    let single = verify::rep_fuse_sweep::<f32>(&channels, &kernels, 100, 1).map_err(|e| e.to_string())?;
    let double = verify::rep_fuse_sweep::<f64>(&channels, &kernels, 100, 2).map_err(|e| e.to_string())?;
    let worst = |rows: &[verify::SweepRow]| rows.iter().map(|r| r.max_abs).fold(0.0, f64::max);
    let (w32, w64) = (worst(&single), worst(&double));
    Ok((
        w32 <= 1e-4 && w64 <= 1e-10,
        format!("9 configs x 100 trials, f32 max {w32:.2e} (<= 1e-4), f64 max {w64:.2e} (<= 1e-10)"),
    ))
}

fn whole_model_fuse() -> Outcome {
    let cfg = ModelConfig::nano();
    let mut model = Model::<f32>::build(&cfg).map_err(|e| e.to_string())?;
    model.randomize_bn(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb2));
    let x = Tensor::<f32>::randn([1, 3, 320, 320], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
    let dev = verify::model_fuse_deviation(&model, &x).map_err(|e| e.to_string())?;
    let worst = dev.iter().copied().fold(0.0, f64::max);
    Ok((
        worst <= 1e-3,
        format!(
            "nano 320x320, N3/N4/N5 max |diff| {:.2e} {:.2e} {:.2e} (<= 1e-3)",
            dev[0], dev[1], dev[2]
        ),
    ))
}

fn bn_fold() -> Outcome {
    let worst = verify::fold_bn_sweep::<f32>(1000, 0).map_err(|e| e.to_string())?;
    Ok((
        worst <= 1e-5,
        format!("1000 random conv+BN configs, f32 max |diff| {worst:.2e} (<= 1e-5)"),
    ))
}

fn gradient_fidelity() -> Outcome {
    let report = gradcheck::run(&["all"], &GradcheckConfig::default()).map_err(|e| e.to_string())?;
    let worst = report.rows.iter().map(|r| r.max_rel).fold(0.0, f64::max);
    let detail = if report.passed() {
        format!("{} checks, worst rel err {worst:.2e} (<= 1e-4)", report.rows.len())
    } else {
        format!("failed: {}", report.failures().join(", "))
    };
    Ok((report.passed(), detail))
}

fn counting_oracle() -> Outcome {
    let mut ok = true;
    let conv = conv_row("c".into(), &ConvSpec::new(16, 32, 3).bias(true), (64, 64));
    ok &= conv.params == 4640 && conv.macs == 18_874_368;
    let rep = RepHDWConv::<f32>::with_default_branches(32, 7, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    unit_rows("r", &Unit::Rep(&rep), (16, 16), true, &mut rows);
    let fused_rep: u64 = rows.iter().map(|r| r.params).sum();
    ok &= fused_rep == 1600;

    let model = Model::<f32>::build(&ModelConfig::nano()).map_err(|e| e.to_string())?;
    let train = model.costs((640, 640), false).map_err(|e| e.to_string())?;
    let fused = model.costs((640, 640), true).map_err(|e| e.to_string())?;
    let mut rep_terms = 0u64;
    let mut fold_terms = 0u64;
    for info in model.inventory() {
        let c = info.out_channels as u64;
        if info.is_depthwise() {
            let small: u64 = info.branch_kernels[1..].iter().map(|&k| (k * k) as u64).sum();
            rep_terms += c * small + 2 * info.branch_kernels.len() as u64 * c - c;
        } else if info.kind == "conv-bn" {
            fold_terms += c;
        }
    }
    let delta = train.total_params - fused.total_params;
    ok &= delta == rep_terms + fold_terms;
    Ok((
        ok,
        format!(
            "conv 3x3 16->32: {} params {} MACs; fused RepHDW k7 c32: {fused_rep}; delta {delta} = {rep_terms} (branches) + {fold_terms} (BN folds)",
            conv.params, conv.macs
        ),
    ))
}

fn calibration() -> Outcome {
    let model = Model::<f32>::build(&ModelConfig::nano()).map_err(|e| e.to_string())?;
    let fused = model.costs((640, 640), true).map_err(|e| e.to_string())?;
    let train = model.costs((640, 640), false).map_err(|e| e.to_string())?;
    let p = fused.total_params as f64 / 1e6;
    let g = fused.total_flops as f64 / 1e9;
    let ok = (p / 3.76 - 1.0).abs() <= 0.2 && (g / 10.51 - 1.0).abs() <= 0.2;
    Ok((
        ok,
        format!(
            "fused {p:.3}M params, {g:.3} GFLOPs at 640 (targets 3.76M / 10.51G +-20%); training graph {:.3}M / {:.3}G",
            train.total_params as f64 / 1e6,
            train.total_flops as f64 / 1e9
        ),
    ))
}

fn kernel_schedule() -> Outcome {
    let model = Model::<f32>::build(&ModelConfig::nano()).map_err(|e| e.to_string())?;
    let (b, n) = (model.backbone_kernels(), model.neck_kernels());
    Ok((
        b == [3, 5, 7, 9] && n == [5, 7, 9],
        format!("backbone {b:?}, neck {n:?}"),
    ))
}

fn erf_growth() -> Outcome {
    let ones = Tensor::<f32>::ones([1, 4, 96, 96]);
    let radius = |k: usize| -> Result<f64, String> {
        let mut stack = DwStack::<f32>::new(4, k, 4, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
        stack.fuse().map_err(|e| e.to_string())?;
        let map = erf_map(&ones, |tape, x| {
            tape.mode.fused = true;
            stack.forward(tape, x)
        })
        .map_err(|e| e.to_string())?;
        Ok(erf_radius(&map, 0.95))
    };
    let (small, large) = (radius(3)?, radius(9)?);
    Ok((
        large > small,
        format!("95%-mass radius, depth 4: 9x9 {large} vs 3x3 {small}"),
    ))
}

fn toy_overfit() -> Outcome {
    let cfg = ToyConfig::default();
    let data = Dataset::blobs(&cfg);
    let mut model = ToyClassifier::<f32>::new(&train::toy_model_config(cfg.seed), 2).map_err(|e| e.to_string())?;
    let report = train::train_toy(&mut model, &data, cfg.steps, cfg.lr, |_, _, _| {}).map_err(|e| e.to_string())?;
    let reached = report.first_step_reaching(0.95);
    let smooth = train::moving_average(&report.losses, 20);
    let monotone = train::is_non_increasing(&smooth);
    let best = report.accuracies.iter().copied().fold(0.0, f64::max);
    Ok((
        reached.is_some() && monotone,
        format!(
            "{} samples, {} steps, lr {}: >= 95% train accuracy at step {}, best {best:.3}, final loss {:.4}, 20-step moving average {}",
            data.len(),
            cfg.steps,
            cfg.lr,
            reached.map_or("never".to_string(), |s| s.to_string()),
            report.final_loss,
            if monotone { "non-increasing" } else { "NOT non-increasing" }
        ),
    ))
}

fn determinism_and_serialization() -> Outcome {
    let cfg = ModelConfig::nano();
    let a = Model::<f32>::build(&cfg).map_err(|e| e.to_string())?;
    let b = Model::<f32>::build(&cfg).map_err(|e| e.to_string())?;
    let bytes = weights::to_bytes(&a);
    let same_weights = bytes == weights::to_bytes(&b);
    let x = Tensor::<f32>::randn([1, 3, 128, 128], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let ya = a.infer(&x, false).map_err(|e| e.to_string())?;
    let same_outputs = ya == b.infer(&x, false).map_err(|e| e.to_string())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("nano.mafw");
    weights::save(&a, &path).map_err(|e| e.to_string())?;
    let mut other = cfg.clone();
    other.seed = 99;
    let mut c = Model::<f32>::build(&other).map_err(|e| e.to_string())?;
    weights::load(&mut c, &path).map_err(|e| e.to_string())?;
    let resave = weights::to_bytes(&c) == std::fs::read(&path).map_err(|e| e.to_string())?;
    let reforward = c.infer(&x, false).map_err(|e| e.to_string())? == ya;
    Ok((
        same_weights && same_outputs && resave && reforward,
        format!(
            "same seed weights {same_weights}, outputs {same_outputs}; save/load re-save identical {resave}, forward identical {reforward} ({} bytes)",
            bytes.len()
        ),
    ))
}

fn ablation_ordering() -> Outcome {
    let report = ablation::run(Preset::Neck, &ModelConfig::nano(), (640, 640)).map_err(|e| e.to_string())?;
    let train: Vec<u64> = report.rows.iter().map(|r| r.params).collect();
    let fused: Vec<u64> = report.rows.iter().map(|r| r.fused_params).collect();
    let labels: Vec<String> = report.rows.iter().map(|r| r.label()).collect();
    let increasing = |v: &[u64]| v.windows(2).all(|w| w[0] < w[1]);
    Ok((
        labels == ["(none)", "saf", "aaf", "saf+aaf"] && increasing(&train) && increasing(&fused),
        format!("{} params {train:?}, fused {fused:?}", labels.join(" < ")),
    ))
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "fusion equivalence",
            budget: Duration::from_secs(120),
            check: fusion_equivalence,
        },
        Criterion {
            id: 2,
            name: "whole-model fuse",
            budget: Duration::from_secs(60),
            check: whole_model_fuse,
        },
        Criterion {
            id: 3,
            name: "BN fold identity",
            budget: Duration::from_secs(10),
            check: bn_fold,
        },
        Criterion {
            id: 4,
            name: "gradient fidelity",
            budget: Duration::from_secs(120),
            check: gradient_fidelity,
        },
        Criterion {
            id: 5,
            name: "counting oracle",
            budget: Duration::MAX,
            check: counting_oracle,
        },
        Criterion {
            id: 6,
            name: "scale calibration",
            budget: Duration::MAX,
            check: calibration,
        },
        Criterion {
            id: 7,
            name: "kernel schedule",
            budget: Duration::MAX,
            check: kernel_schedule,
        },
        Criterion {
            id: 8,
            name: "ERF growth",
            budget: Duration::from_secs(30),
            check: erf_growth,
        },
        Criterion {
            id: 9,
            name: "toy overfit",
            budget: Duration::from_secs(300),
            check: toy_overfit,
        },
        Criterion {
            id: 10,
            name: "determinism and serialization",
            budget: Duration::MAX,
            check: determinism_and_serialization,
        },
        Criterion {
            id: 11,
            name: "neck ablation ordering",
            budget: Duration::MAX,
            check: ablation_ordering,
        },
    ];
    let mut failed = 0;
    for c in &criteria {
        let started = Instant::now();
        let outcome = (c.check)();
        let elapsed = started.elapsed();
        let in_budget = elapsed <= c.budget;
        let (pass, detail) = match outcome {
            Ok((pass, detail)) => (pass && in_budget, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let budget = if c.budget == Duration::MAX {
            String::new()
        } else {
            format!(" / {:.0?}{}", c.budget, if in_budget { "" } else { " OVER BUDGET" })
        };
        println!(
            "{} {:>2} {}: {} [{:.2?}{budget}]",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed
        );
        if !pass {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
