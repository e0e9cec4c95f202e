//! Command-line interface. The binary is a thin wrapper around [`run`].
//!
//! Exit codes: 0 success, 1 check failed, 2 usage or configuration error,
//! 3 numerical error (NaN/Inf with checking enabled, divergence).

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::ablation::{self, Preset};
use crate::autograd::OpKind;
use crate::erf::{erf_radius, ErfMap};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckConfig};
use crate::model::{Model, ModelConfig, TAP_NAMES};
use crate::nn::Layer;
use crate::tensor::Tensor;
use crate::train::{self, Dataset, ToyClassifier, ToyConfig};
use crate::verify;
use crate::weights;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "mafyolo",
    version,
    about = "Build, count, fuse and probe mafyolo detectors"
)]
pub struct Cli {
    /// Model config JSON (defaults to the built-in nano network).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Weight file to load after building.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-layer parameter and MAC table for the training and fused graphs.
    Summary {
        #[arg(long, default_value_t = 640)]
        input_size: usize,
    },
    /// Neck wiring as an edge list, one `src -> dst [lane]` per line.
    Wiring,
    /// Checks that the fused network reproduces the training-graph outputs.
    VerifyFuse(VerifyArgs),
    /// Finite-difference check of the backward rules.
    Gradcheck {
        /// `all` or a comma-separated list of checks.
        #[arg(long, default_value = "all")]
        ops: String,
        /// Corrupt one backward rule (test hook).
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Effective receptive field of a tap; writes CSV and PGM.
    Erf(ErfArgs),
    /// Trains the reduced-width classifier on synthetic blobs.
    ToyTrain {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Loss curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Params and FLOPs over a toggle grid.
    Ablate {
        /// block|neck|components (or table2|table3|table5).
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 640)]
        input_size: usize,
    },
    /// Writes the resolved config and freshly initialised weights.
    Build {
        #[arg(long)]
        out_config: Option<PathBuf>,
        #[arg(long)]
        out_weights: Option<PathBuf>,
        /// Store fused weights as well.
        #[arg(long)]
        fused: bool,
    },
    /// Runs the network on a seeded random input and prints output statistics.
    Forward {
        #[arg(long, default_value_t = 320)]
        input_size: usize,
        #[arg(long)]
        fused: bool,
    },
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Check each RepHDW unit separately instead of the whole network.
    #[arg(long)]
    pub per_unit: bool,
    #[arg(long, default_value_t = 64)]
    pub input_size: usize,
    /// Keep the loaded or initial BN statistics instead of drawing random ones.
    #[arg(long)]
    pub keep_bn: bool,
}

#[derive(Args, Debug)]
pub struct ErfArgs {
    #[arg(long, default_value = "n3")]
    pub tap: String,
    /// Output stem; `.csv` and `.pgm` are appended.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub input_size: usize,
    #[arg(long, default_value_t = 0.95)]
    pub mass: f64,
    /// Use the fused graph.
    #[arg(long)]
    pub fused: bool,
    /// Average over this many seeded random inputs instead of the all-ones input.
    #[arg(long)]
    pub random_inputs: Option<usize>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::Divergence { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn emit(out: &mut dyn Write, format: Format, text: &str, value: &impl Serialize) -> Result<()> {
    match format {
        Format::Text => out.write_all(text.as_bytes())?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, value)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn verdict(pass: bool) -> i32 {
    if pass {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

impl Cli {
    fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::load(p)?,
            None => ModelConfig::nano(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn model(&self) -> Result<Model> {
        let mut m = Model::build(&self.model_config()?)?;
        if let Some(w) = &self.weights {
            weights::load(&mut m, w)?;
        }
        Ok(m)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let started = Instant::now();
    let code = match &cli.command {
        Command::Summary { input_size } => summary(cli, *input_size, out)?,
        Command::Wiring => {
            let model = cli.model()?;
            let value = json!({ "edges": model.neck.wiring(), "lineage": model.neck.lineage() });
            emit(out, cli.format, &model.neck.wiring_text(), &value)?;
            EXIT_OK
        }
        Command::VerifyFuse(a) => verify_fuse(cli, a, out)?,
        Command::Gradcheck { ops, corrupt, tol } => gradcheck_cmd(cli, ops, corrupt.as_deref(), *tol, out)?,
        Command::Erf(a) => erf_cmd(cli, a, out)?,
        Command::ToyTrain {
            steps,
            lr,
            samples,
            curve,
        } => toy_train(cli, *steps, *lr, *samples, curve.as_ref(), out)?,
        Command::Ablate { preset, input_size } => {
            let preset: Preset = preset.parse()?;
            let rep = ablation::run(preset, &cli.model_config()?, (*input_size, *input_size))?;
            emit(out, cli.format, &rep.table(), &rep)?;
            EXIT_OK
        }
        Command::Build {
            out_config,
            out_weights,
            fused,
        } => build(cli, out_config.as_ref(), out_weights.as_ref(), *fused, out)?,
        Command::Forward { input_size, fused } => forward(cli, *input_size, *fused, out)?,
    };
    let _ = writeln!(err, "elapsed {:.2?}", started.elapsed());
    Ok(code)
}

fn summary(cli: &Cli, size: usize, out: &mut dyn Write) -> Result<i32> {
    let model = cli.model()?;
    let train = model.costs((size, size), false)?;
    let fused = model.costs((size, size), true)?;
    let bk = model.backbone_kernels();
    let nk = model.neck_kernels();
    let mut text = train.table();
    text.push('\n');
    text.push_str(&fused.table());
    text.push_str(&format!(
        "\nreparameterization removes {} params and {} MACs\nbackbone kernels {bk:?}, neck kernels {nk:?}\n",
        train.total_params - fused.total_params,
        train.total_macs - fused.total_macs
    ));
    let value = json!({
        "train": train,
        "fused": fused,
        "backbone_kernels": bk,
        "neck_kernels": nk,
    });
    emit(out, cli.format, &text, &value)?;
    Ok(EXIT_OK)
}

fn verify_fuse(cli: &Cli, a: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let mut model = cli.model()?;
    model.set_training(false);
    if !a.keep_bn && cli.weights.is_none() {
        model.randomize_bn(&mut ChaCha8Rng::seed_from_u64(cli.seed() ^ 0xb2));
    }
    model.unfuse();
    let mut text = String::new();
    if a.per_unit {
        let rows = verify::unit_fuse_deviations(&model, a.trials, 16, cli.seed())?;
        let worst = rows.iter().map(|r| r.max_abs).fold(0.0, f64::max);
        for r in &rows {
            text.push_str(&format!(
                "{:<48} k{} c{:<4} max |diff| {:.3e}\n",
                r.name, r.kernel, r.channels, r.max_abs
            ));
        }
        let pass = worst <= a.tol;
        text.push_str(&format!(
            "{} {} units, {} trials each, max |diff| {:.3e} (tol {:e})\n",
            if pass { "PASS" } else { "FAIL" },
            rows.len(),
            a.trials,
            worst,
            a.tol
        ));
        emit(
            out,
            cli.format,
            &text,
            &json!({"mode": "per-unit", "tol": a.tol, "trials": a.trials, "max_abs": worst, "pass": pass, "units": rows}),
        )?;
        return Ok(verdict(pass));
    }
    model.check_input(a.input_size, a.input_size)?;
    let mut fused = model.clone();
    fused.fuse()?;
    let mut worst = [0.0f64; 3];
    for t in 0..a.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(verify::trial_seed(cli.seed(), t));
        let x = Tensor::<f32>::randn([1, model.config.in_channels, a.input_size, a.input_size], 1.0, &mut rng);
        let reference = model.infer(&x, false)?;
        let merged = fused.infer(&x, true)?;
        for i in 0..3 {
            worst[i] = worst[i].max(reference[i].max_abs_diff(&merged[i]));
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    let pass = max <= a.tol;
    for (i, w) in worst.iter().enumerate() {
        text.push_str(&format!("head{} max |diff| {:.3e}\n", i + 3, w));
    }
    text.push_str(&format!(
        "{} whole network at {s}x{s}, {} trials, max |diff| {:.3e} (tol {:e})\n",
        if pass { "PASS" } else { "FAIL" },
        a.trials,
        max,
        a.tol,
        s = a.input_size
    ));
    emit(
        out,
        cli.format,
        &text,
        &json!({"mode": "model", "input_size": a.input_size, "tol": a.tol, "trials": a.trials, "per_output": worst, "max_abs": max, "pass": pass}),
    )?;
    Ok(verdict(pass))
}

fn gradcheck_cmd(cli: &Cli, ops: &str, corrupt: Option<&str>, tol: f64, out: &mut dyn Write) -> Result<i32> {
    let names = gradcheck::parse_names(ops)?;
    let corrupt = match corrupt {
        Some(n) => Some(OpKind::from_name(n).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown op kind '{n}' (expected one of {})", known.join(", ")))
        })?),
        None => None,
    };
    let cfg = GradcheckConfig {
        tol,
        seed: cli.seed(),
        corrupt,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&names, &cfg)?;
    let mut text = report.table();
    let failures = report.failures();
    if failures.is_empty() {
        text.push_str("all checks passed\n");
    } else {
        text.push_str(&format!("failed: {}\n", failures.join(", ")));
    }
    emit(out, cli.format, &text, &report)?;
    Ok(verdict(report.passed()))
}

fn erf_cmd(cli: &Cli, a: &ErfArgs, out: &mut dyn Write) -> Result<i32> {
    if !TAP_NAMES.contains(&a.tap.as_str()) {
        return Err(Error::UnknownTap(a.tap.clone()));
    }
    let mut model = cli.model()?;
    if a.fused {
        model.set_training(false);
        model.fuse()?;
    }
    let shape = [1, model.config.in_channels, a.input_size, a.input_size];
    let fused = a.fused;
    let map_for = |x: &Tensor<f32>| -> Result<ErfMap> {
        crate::erf::erf_map(x, |tape, v| {
            tape.mode.fused = fused;
            let taps = model.forward_taps(tape, v)?;
            Ok(taps.get(&a.tap).expect("known tap"))
        })
    };
    let map = match a.random_inputs {
        None | Some(0) => map_for(&Tensor::ones(shape))?,
        Some(n) => {
            let mut acc: Option<ErfMap> = None;
            for t in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(verify::trial_seed(cli.seed(), t));
                let m = map_for(&Tensor::randn(shape, 1.0, &mut rng))?;
                acc = Some(match acc {
                    None => m,
                    Some(mut s) => {
                        s.data.iter_mut().zip(&m.data).for_each(|(a, b)| *a += b);
                        s
                    }
                });
            }
            let mut m = acc.expect("n > 0");
            m.data.iter_mut().for_each(|v| *v /= n as f64);
            m
        }
    };
    let radius = erf_radius(&map, a.mass);
    if let Some(stem) = &a.out {
        map.write(stem)?;
    }
    let text = format!(
        "tap {} on {}x{}: {:.0}% mass radius {}\n",
        a.tap,
        a.input_size,
        a.input_size,
        a.mass * 100.0,
        radius
    );
    emit(
        out,
        cli.format,
        &text,
        &json!({"tap": a.tap, "input_size": a.input_size, "mass": a.mass, "radius": radius, "support": map.support()}),
    )?;
    Ok(EXIT_OK)
}

fn toy_train(
    cli: &Cli,
    steps: usize,
    lr: f64,
    samples: usize,
    curve: Option<&PathBuf>,
    out: &mut dyn Write,
) -> Result<i32> {
    let toy = ToyConfig {
        samples,
        steps,
        lr,
        seed: cli.seed(),
        ..ToyConfig::default()
    };
    let cfg = match &cli.config {
        Some(_) => cli.model_config()?,
        None => train::toy_model_config(cli.seed()),
    };
    let data = Dataset::blobs(&toy);
    let mut model = ToyClassifier::<f32>::new(&cfg, 2)?;
    let mut text = String::new();
    let report = train::train_toy(&mut model, &data, steps, lr, |step, loss, acc| {
        if step % 25 == 0 || step + 1 == steps {
            text.push_str(&format!("step {step:>4}  loss {loss:.6}  accuracy {acc:.3}\n"));
        }
    })?;
    let smooth = train::moving_average(&report.losses, 20);
    let monotone = train::is_non_increasing(&smooth);
    text.push_str(&format!(
        "final loss {:.6}, training accuracy {:.3}, eval accuracy {:.3}, first step at 95%: {}, smoothed loss monotone: {}\n",
        report.final_loss,
        report.final_accuracy,
        report.eval_accuracy,
        report
            .first_step_reaching(0.95)
            .map_or_else(|| "never".to_string(), |s| s.to_string()),
        monotone
    ));
    if let Some(path) = curve {
        std::fs::write(path, train::curve_csv(&report))?;
    }
    emit(
        out,
        cli.format,
        &text,
        &json!({
            "final_loss": report.final_loss,
            "final_accuracy": report.final_accuracy,
            "eval_accuracy": report.eval_accuracy,
            "first_step_95": report.first_step_reaching(0.95),
            "smoothed_monotone": monotone,
            "losses": report.losses,
        }),
    )?;
    Ok(EXIT_OK)
}

fn build(
    cli: &Cli,
    out_config: Option<&PathBuf>,
    out_weights: Option<&PathBuf>,
    fused: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    let mut model = cli.model()?;
    if fused {
        model.set_training(false);
        model.fuse()?;
    }
    let mut text = String::new();
    if let Some(p) = out_config {
        std::fs::write(p, model.config.to_json())?;
        text.push_str(&format!("wrote config {}\n", p.display()));
    }
    if let Some(p) = out_weights {
        weights::save(&model, p)?;
        text.push_str(&format!("wrote weights {}\n", p.display()));
    }
    if out_config.is_none() && out_weights.is_none() {
        text.push_str(&model.config.to_json());
        text.push('\n');
    }
    text.push_str(&format!("{} learnable parameters\n", model.param_count()));
    emit(
        out,
        cli.format,
        &text,
        &json!({"config": model.config, "params": model.param_count(), "fused": fused}),
    )?;
    Ok(EXIT_OK)
}

fn forward(cli: &Cli, size: usize, fused: bool, out: &mut dyn Write) -> Result<i32> {
    let mut model = cli.model()?;
    model.check_input(size, size)?;
    if fused {
        model.set_training(false);
        model.fuse()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    let x = Tensor::<f32>::randn([1, model.config.in_channels, size, size], 1.0, &mut rng);
    let outs = model.infer(&x, fused)?;
    let mut text = String::new();
    let mut rows = Vec::new();
    for (i, o) in outs.iter().enumerate() {
        let s = o.shape().0;
        let sum: f64 = o.data().iter().map(|&v| v as f64).sum();
        let mean_abs = o.data().iter().map(|&v| (v as f64).abs()).sum::<f64>() / o.numel() as f64;
        text.push_str(&format!(
            "head{} {:?} sum {:.6e} mean|x| {:.6e}\n",
            i + 3,
            s,
            sum,
            mean_abs
        ));
        rows.push(json!({"name": format!("head{}", i + 3), "shape": s, "sum": sum, "mean_abs": mean_abs}));
    }
    emit(
        out,
        cli.format,
        &text,
        &json!({"fused": fused, "input_size": size, "outputs": rows}),
    )?;
    Ok(EXIT_OK)
}
