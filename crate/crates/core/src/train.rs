//! Toy two-class training run through the full backbone + neck graph.
//!
//! Images hold one Gaussian blob; the class is the blob's scale. The
//! classifier pools N3..N5, concatenates them and applies a 1x1 linear layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ForwardMode, Tape, Var};
use crate::blocks::HelanStyle;
use crate::error::{Error, Result};
use crate::mafpn::{Mafpn, NeckConfig};
use crate::model::{Backbone, HeadConfig, ModelConfig};
use crate::nn::{sgd_step, update_running_stats, Conv, Layer, Unit, UnitMut, BN_MOMENTUM};
use crate::ops::ConvSpec;
use crate::tensor::{join, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub samples: usize,
    pub size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Blob standard deviations (pixels) for class 0 and class 1.
    pub sigmas: [f64; 2],
    pub noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            samples: 64,
            size: 32,
            steps: 500,
            lr: 0.05,
            seed: 0,
            sigmas: [1.5, 5.0],
            noise: 0.05,
        }
    }
}

/// The reduced-width network used by the toy run.
pub fn toy_model_config(seed: u64) -> ModelConfig {
    let block = HelanStyle {
        n_bottlenecks: 1,
        ..HelanStyle::default()
    };
    ModelConfig {
        in_channels: 3,
        stem: 8,
        stage_widths: vec![8, 16, 16, 32],
        stage_depths: vec![1, 1, 1, 1],
        backbone_kernels: vec![3, 5, 7, 9],
        block: block.clone(),
        neck: NeckConfig {
            widths: [16, 16, 32],
            block,
            ..NeckConfig::default()
        },
        head: HeadConfig::default(),
        seed,
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Balanced classes; blob centres jittered around the middle.
    pub fn blobs(cfg: &ToyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let s = cfg.size;
        let n = cfg.samples;
        let mut images = Tensor::zeros([n, 3, s, s]);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for (i, &label) in labels.iter().enumerate() {
            let sigma = cfg.sigmas[label];
            let cy = s as f64 / 2.0 + rng.random_range(-(s as f64) / 8.0..s as f64 / 8.0);
            let cx = s as f64 / 2.0 + rng.random_range(-(s as f64) / 8.0..s as f64 / 8.0);
            let gains = [1.0, rng.random_range(0.6..1.0), rng.random_range(0.3..0.7)];
            for (c, gain) in gains.iter().enumerate() {
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let v = gain * (-d2 / (2.0 * sigma * sigma)).exp() + cfg.noise * rng.random_range(-1.0..1.0);
                        images.set([i, c, y, x], v as f32);
                    }
                }
            }
        }
        Dataset { images, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let s = self.images.shape();
        let per = s.c() * s.plane();
        Dataset {
            images: Tensor::new([n, s.c(), s.h(), s.w()], self.images.data()[..n * per].to_vec())
                .expect("prefix of a valid tensor"),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Backbone + neck + pooled linear classifier.
#[derive(Clone, Debug)]
pub struct ToyClassifier<T: Scalar = f32> {
    pub backbone: Backbone<T>,
    pub neck: Mafpn<T>,
    pub fc: Conv<T>,
}

impl<T: Scalar> ToyClassifier<T> {
    pub fn new(cfg: &ModelConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = Backbone::new(cfg, &mut rng)?;
        let neck = Mafpn::new(cfg.neck.clone(), backbone.widths(), &mut rng)?;
        let pooled: usize = neck.out_widths().iter().sum();
        let fc = Conv::new(ConvSpec::new(pooled, classes, 1).bias(true), &mut rng)?;
        Ok(ToyClassifier { backbone, neck, fc })
    }

    /// Logits of shape `(N, classes, 1, 1)`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (_, taps) = self.backbone.forward(tape, x)?;
        let outs = self.neck.forward(tape, taps)?;
        let pooled = outs
            .iter()
            .map(|&o| tape.global_avg_pool(o))
            .collect::<Result<Vec<_>>>()?;
        let feat = tape.concat_channels(&pooled)?;
        self.fc.forward(tape, feat)
    }
}

impl<T: Scalar> Layer<T> for ToyClassifier<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        self.backbone.units(&join(prefix, "backbone"), out);
        self.neck.units(&join(prefix, "neck"), out);
        out.push((join(prefix, "fc"), Unit::Conv(&self.fc)));
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        self.backbone.units_mut(&join(prefix, "backbone"), out);
        self.neck.units_mut(&join(prefix, "neck"), out);
        out.push((join(prefix, "fc"), UnitMut::Conv(&mut self.fc)));
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyReport {
    pub losses: Vec<f64>,
    /// Training-mode (batch statistics) accuracy at every step.
    pub accuracies: Vec<f64>,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// Accuracy after training, with running BN statistics.
    pub eval_accuracy: f64,
}

impl ToyReport {
    /// First step whose training accuracy reached `target`.
    pub fn first_step_reaching(&self, target: f64) -> Option<usize> {
        self.accuracies.iter().position(|&a| a >= target)
    }
}

fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.shape().c();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let best = (0..k)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite"))
                .unwrap_or(0);
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Classifier accuracy on `data` using running BN statistics.
pub fn evaluate<T: Scalar>(model: &ToyClassifier<T>, data: &Dataset) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(data.images.cast());
    let logits = model.forward(&mut tape, x)?;
    Ok(accuracy(tape.value(logits), &data.labels))
}

/// Full-batch SGD with fixed learning rate and training-mode BN.
pub fn train_toy<T: Scalar>(
    model: &mut ToyClassifier<T>,
    data: &Dataset,
    steps: usize,
    lr: f64,
    mut log: impl FnMut(usize, f64, f64),
) -> Result<ToyReport> {
    model.set_training(true);
    model.unfuse();
    let images: Tensor<T> = data.images.cast();
    let mut losses = Vec::with_capacity(steps);
    let mut accuracies = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut tape = Tape::with_mode(ForwardMode {
            batch_stats: true,
            ..Default::default()
        });
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Divergence { step },
            other => other,
        };
        let x = tape.constant(images.clone());
        let logits = model.forward(&mut tape, x).map_err(diverged)?;
        let loss = tape.softmax_cross_entropy(logits, &data.labels).map_err(diverged)?;
        let l = tape.value(loss).data()[0].as_f64();
        if !l.is_finite() {
            return Err(Error::Divergence { step });
        }
        let acc = accuracy(tape.value(logits), &data.labels);
        tape.backward(loss).map_err(diverged)?;
        sgd_step(model, &tape, T::of(lr));
        update_running_stats(model, &tape, T::of(BN_MOMENTUM));
        losses.push(l);
        accuracies.push(acc);
        log(step, l, acc);
    }
    model.set_training(false);
    let eval_accuracy = evaluate(model, data)?;
    Ok(ToyReport {
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        final_accuracy: accuracies.last().copied().unwrap_or(0.0),
        losses,
        accuracies,
        eval_accuracy,
    })
}

/// Trailing means over windows of `window` consecutive values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

pub fn is_non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

/// Loss curve as CSV with columns `step,loss,accuracy`.
pub fn curve_csv(report: &ToyReport) -> String {
    let mut s = String::from("step,loss,accuracy\n");
    for (i, (l, a)) in report.losses.iter().zip(&report.accuracies).enumerate() {
        s.push_str(&format!("{i},{l:.8},{a:.4}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_balanced_and_seeded() {
        let cfg = ToyConfig::default();
        let a = Dataset::blobs(&cfg);
        let b = Dataset::blobs(&cfg);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 32);
        assert_eq!(a.images.shape().0, [64, 3, 32, 32]);
        assert_eq!(a.take(5).len(), 5);
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
        assert!(is_non_increasing(&[3.0, 2.0, 2.0, 1.0]));
        assert!(!is_non_increasing(&[3.0, 2.0, 2.5]));
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let cfg = ToyConfig::default();
        let data = Dataset::blobs(&cfg).take(8);
        let mut model = ToyClassifier::<f32>::new(&toy_model_config(0), 2).unwrap();
        let r = train_toy(&mut model, &data, 3, 0.0, |_, _, _| {}).unwrap();
        assert!(r.losses.iter().all(|&l| l == r.losses[0]));
    }
}
