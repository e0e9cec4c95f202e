//! Numerical equivalence checks for BN folding and branch merging.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::Tape;
use crate::error::Result;
use crate::model::Model;
use crate::nn::{BatchNorm, Layer, Unit};
use crate::ops::{self, ConvSpec};
use crate::rep_conv::{fold_bn, RepHDWConv};
use crate::tensor::{Scalar, Tensor};

/// Independent per-trial seed derived from a root seed.
pub fn trial_seed(root: u64, trial: usize) -> u64 {
    let mut z = root.wrapping_add((trial as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random RepHDW unit (all admissible small kernels, random BN) on a random
/// input; returns max |branch sum - merged conv|.
pub fn rep_fuse_trial<T: Scalar>(channels: usize, large_kernel: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = RepHDWConv::<T>::with_default_branches(channels, large_kernel, &mut rng)?;
    unit.randomize_bn(&mut rng);
    let side = rng.random_range(large_kernel..large_kernel + 8);
    let x = Tensor::<T>::randn([1, channels, side, side], 1.0, &mut rng);
    rep_deviation(&unit, &x)
}

/// Max deviation between `unit`'s training graph and its merged kernel on `x`.
pub fn rep_deviation<T: Scalar>(unit: &RepHDWConv<T>, x: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = unit.forward_train(&mut tape, v)?;
    let (w, b) = unit.merged()?;
    let fused = ops::conv2d(x, &w, Some(&b), &ConvSpec::depthwise(unit.channels, unit.large_kernel))?;
    Ok(tape.value(y).max_abs_diff(&fused))
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub channels: usize,
    pub kernel: usize,
    pub trials: usize,
    pub max_abs: f64,
}

/// `trials` random units for every `(channels, kernel)` pair.
pub fn rep_fuse_sweep<T: Scalar>(
    channels: &[usize],
    kernels: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &c in channels {
        for &k in kernels {
            let devs = (0..trials)
                .into_par_iter()
                .map(|t| rep_fuse_trial::<T>(c, k, trial_seed(seed ^ ((c * 100 + k) as u64), t)))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(SweepRow {
                channels: c,
                kernel: k,
                trials,
                max_abs: devs.into_iter().fold(0.0, f64::max),
            });
        }
    }
    Ok(rows)
}

/// Random dense or grouped convolution followed by random BN, compared with
/// the folded convolution.
pub fn fold_bn_trial<T: Scalar>(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = rng.random_range(1..=3);
    let cin = groups * rng.random_range(1..=6);
    let cout = groups * rng.random_range(1..=6);
    let k = [1, 3, 5, 7][rng.random_range(0..4)];
    let stride = rng.random_range(1..=2);
    let spec = ConvSpec::new(cin, cout, k).groups(groups).stride(stride);
    let w = Tensor::<T>::randn(
        spec.weight_shape(),
        (2.0 / (cin / groups * k * k) as f64).sqrt(),
        &mut rng,
    );
    let mut bn = BatchNorm::<T>::new(cout);
    bn.randomize(&mut rng);
    let bn = bn.params();
    let side = rng.random_range(k..k + 8);
    let x = Tensor::<T>::randn([rng.random_range(1..=2), cin, side, side], 1.0, &mut rng);
    let reference = ops::batchnorm_infer(&ops::conv2d(&x, &w, None, &spec)?, &bn)?;
    let (wf, bf) = fold_bn(&w, &bn)?;
    let folded = ops::conv2d(&x, &wf, Some(&bf), &spec.bias(true))?;
    Ok(reference.max_abs_diff(&folded))
}

/// Largest deviation over `trials` fold trials.
pub fn fold_bn_sweep<T: Scalar>(trials: usize, seed: u64) -> Result<f64> {
    let devs = (0..trials)
        .into_par_iter()
        .map(|t| fold_bn_trial::<T>(trial_seed(seed, t)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(devs.into_iter().fold(0.0, f64::max))
}

/// Per-output max deviation between the running-statistics graph and the
/// fully fused graph of `model` on `x`. The model itself is left untouched.
pub fn model_fuse_deviation<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<[f64; 3]> {
    let mut fused = model.clone();
    fused.set_training(false);
    fused.fuse()?;
    let reference = model.infer(x, false)?;
    let merged = fused.infer(x, true)?;
    Ok([0, 1, 2].map(|i| reference[i].max_abs_diff(&merged[i])))
}

#[derive(Clone, Debug, Serialize)]
pub struct UnitDeviation {
    pub name: String,
    pub kernel: usize,
    pub channels: usize,
    pub max_abs: f64,
}

/// Max deviation of every RepHDW unit of `layer` over `trials` random inputs.
pub fn unit_fuse_deviations<T: Scalar, L: Layer<T> + ?Sized>(
    layer: &L,
    trials: usize,
    side: usize,
    seed: u64,
) -> Result<Vec<UnitDeviation>> {
    let units: Vec<(String, &RepHDWConv<T>)> = layer
        .unit_list()
        .into_iter()
        .filter_map(|(name, u)| match u {
            Unit::Rep(r) => Some((name, r)),
            _ => None,
        })
        .collect();
    units
        .par_iter()
        .enumerate()
        .map(|(i, (name, r))| {
            let mut max_abs: f64 = 0.0;
            for t in 0..trials {
                let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed ^ i as u64, t));
                let x = Tensor::<T>::randn([1, r.channels, side, side], 1.0, &mut rng);
                max_abs = max_abs.max(rep_deviation(r, &x)?);
            }
            Ok(UnitDeviation {
                name: name.clone(),
                kernel: r.large_kernel,
                channels: r.channels,
                max_abs,
            })
        })
        .collect()
}
