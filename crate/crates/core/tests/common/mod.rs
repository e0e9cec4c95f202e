//! Reference implementations written as plain loops, independent of the
//! library's kernels.
#![allow(dead_code)]

use mafyolo::ops::{BatchNormParams, ConvSpec};
use mafyolo::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct-definition grouped convolution with zero padding.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, spec: &ConvSpec) -> Tensor<f64> {
    let [n, _, h, wd] = x.shape().0;
    let k = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let ho = (h as isize + 2 * p - k as isize) / s + 1;
    let wo = (wd as isize + 2 * p - k as isize) / s + 1;
    let ipg = spec.in_channels / spec.groups;
    let opg = spec.out_channels / spec.groups;
    let mut out = Tensor::zeros([n, spec.out_channels, ho as usize, wo as usize]);
    for b in 0..n {
        for oc in 0..spec.out_channels {
            let g = oc / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for icg in 0..ipg {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let iy = oy * s + ky - p;
                                let ix = ox * s + kx - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at([oc, icg, ky as usize, kx as usize])
                                    * x.at([b, g * ipg + icg, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.set([b, oc, oy as usize, ox as usize], acc);
                }
            }
        }
    }
    out
}

pub fn naive_bn(x: &Tensor<f64>, bn: &BatchNormParams<f64>) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |[n, c, y, xx]| {
        bn.gamma[c] * (x.at([n, c, y, xx]) - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt() + bn.beta[c]
    })
}

pub fn naive_silu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v / (1.0 + (-v).exp()))
}

pub fn naive_add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(a.shape(), |i| a.at(i) + b.at(i))
}

pub fn naive_concat(xs: &[&Tensor<f64>]) -> Tensor<f64> {
    let [n, _, h, w] = xs[0].shape().0;
    let c: usize = xs.iter().map(|t| t.shape().c()).sum();
    Tensor::from_fn([n, c, h, w], |[b, mut ch, y, x]| {
        for t in xs {
            if ch < t.shape().c() {
                return t.at([b, ch, y, x]);
            }
            ch -= t.shape().c();
        }
        unreachable!()
    })
}

pub fn naive_upsample(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().0;
    Tensor::from_fn([n, c, 2 * h, 2 * w], |[b, ch, y, xx]| x.at([b, ch, y / 2, xx / 2]))
}

pub fn random_bn(c: usize, r: &mut ChaCha8Rng) -> BatchNormParams<f64> {
    use rand::Rng;
    BatchNormParams {
        gamma: (0..c).map(|_| r.random_range(0.5..1.5)).collect(),
        beta: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
        running_mean: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
        running_var: (0..c).map(|_| r.random_range(0.5..2.0)).collect(),
        eps: 1e-5,
    }
}

pub fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}

use mafyolo::blocks::{Bottleneck, Helan};
use mafyolo::nn::{ConvBn, Layer};
use mafyolo::rep_conv::RepHDWConv;

pub fn ref_convbn(x: &Tensor<f64>, u: &ConvBn<f64>) -> Tensor<f64> {
    let y = naive_bn(&naive_conv(x, &u.conv.weight.value, None, &u.conv.spec), &u.bn.params());
    if u.act {
        naive_silu(&y)
    } else {
        y
    }
}

pub fn ref_rep(x: &Tensor<f64>, r: &RepHDWConv<f64>) -> Tensor<f64> {
    let mut acc = Tensor::zeros(x.shape());
    for b in &r.branches {
        let y = naive_conv(x, &b.weight.value, None, &ConvSpec::depthwise(r.channels, b.kernel));
        acc = naive_add(&acc, &naive_bn(&y, &b.bn.params()));
    }
    acc
}

pub fn ref_bottleneck(x: &Tensor<f64>, b: &Bottleneck<f64>) -> Tensor<f64> {
    let h = ref_convbn(x, &b.pw_expand);
    let h = naive_silu(&ref_rep(&h, &b.dw));
    ref_convbn(&h, &b.pw_shrink)
}

/// Channels `[start, start + len)`.
pub fn naive_narrow(x: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let [n, _, h, w] = x.shape().0;
    Tensor::from_fn([n, len, h, w], |[b, c, y, xx]| x.at([b, start + c, y, xx]))
}

pub fn ref_helan(x: &Tensor<f64>, m: &Helan<f64>) -> Tensor<f64> {
    let hidden = m.config.hidden;
    let y = ref_convbn(x, &m.pw_in);
    let s0 = naive_narrow(&y, 0, hidden);
    let s1 = naive_narrow(&y, hidden, hidden);
    let mut chain = Vec::new();
    let mut cur = s1.clone();
    for b in &m.bottlenecks {
        cur = ref_bottleneck(&cur, b);
        chain.push(cur.clone());
    }
    let cat = if m.config.use_elan {
        let mut lanes = vec![&s0, &s1];
        lanes.extend(chain.iter());
        naive_concat(&lanes)
    } else {
        naive_concat(&[&s0, &cur])
    };
    ref_convbn(&cat, &m.pw_out)
}

pub fn eval<L: Layer<f64>>(
    layer: &L,
    x: &Tensor<f64>,
    f: impl Fn(&L, &mut mafyolo::autograd::Tape<f64>, mafyolo::autograd::Var) -> mafyolo::autograd::Var,
) -> Tensor<f64> {
    let mut tape = mafyolo::autograd::Tape::new();
    let v = tape.constant(x.clone());
    let y = f(layer, &mut tape, v);
    tape.value(y).clone()
}
