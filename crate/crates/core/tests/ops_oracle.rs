mod common;

use common::*;
use mafyolo::autograd::Tape;
use mafyolo::ops::{self, ConvSpec};
use mafyolo::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn conv_matches_naive_loops() {
    let mut r = rng(11);
    for k in [1, 3, 5, 7, 9] {
        for stride in [1, 2] {
            for dw in [false, true] {
                let c = 4;
                let spec = if dw {
                    ConvSpec::depthwise(c, k)
                } else {
                    ConvSpec::new(c, 6, k)
                }
                .stride(stride)
                .bias(true);
                let x = Tensor::<f64>::randn([2, c, 11, 13], 1.0, &mut r);
                let w = Tensor::randn(spec.weight_shape(), 0.5, &mut r);
                let b = Tensor::<f64>::randn([1, spec.out_channels, 1, 1], 1.0, &mut r).into_data();
                let fast = ops::conv2d(&x, &w, Some(&b), &spec).unwrap();
                let slow = naive_conv(&x, &w, Some(&b), &spec);
                assert!(max_diff(&fast, &slow) < 1e-5, "k{k} s{stride} dw{dw}");
                let fast32 = ops::conv2d(
                    &x.cast::<f32>(),
                    &w.cast(),
                    Some(&b.iter().map(|&v| v as f32).collect::<Vec<_>>()),
                    &spec,
                )
                .unwrap();
                assert!(
                    fast32.cast::<f64>().max_abs_diff(&slow) < 1e-4,
                    "f32 k{k} s{stride} dw{dw}"
                );
            }
        }
    }
}

#[test]
fn grouped_and_unpadded_conv_match_naive() {
    let mut r = rng(12);
    for (groups, pad) in [(2, 0), (3, 1), (2, 2)] {
        let spec = ConvSpec::new(6, 12, 3).groups(groups).padding(pad);
        let x = Tensor::<f64>::randn([1, 6, 7, 5], 1.0, &mut r);
        let w = Tensor::randn(spec.weight_shape(), 1.0, &mut r);
        let fast = ops::conv2d(&x, &w, None, &spec).unwrap();
        assert!(max_diff(&fast, &naive_conv(&x, &w, None, &spec)) < 1e-10);
    }
}

#[test]
fn conv_backward_is_the_adjoint() {
    // <conv(x), dy> == <x, dx(dy)> and == <w, dw(dy)>.
    let mut r = rng(13);
    for (k, stride, dw) in [(3, 1, false), (3, 2, true), (7, 2, false), (5, 1, true), (1, 2, false)] {
        let c = 3;
        let spec = if dw {
            ConvSpec::depthwise(c, k)
        } else {
            ConvSpec::new(c, 5, k)
        }
        .stride(stride);
        let x = Tensor::<f64>::randn([2, c, 9, 8], 1.0, &mut r);
        let w = Tensor::randn(spec.weight_shape(), 1.0, &mut r);
        let y = ops::conv2d(&x, &w, None, &spec).unwrap();
        let dy = Tensor::randn(y.shape(), 1.0, &mut r);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y, &dy);
        let dx = ops::conv2d_backward_input(&dy, &w, &spec, x.shape());
        let dwt = ops::conv2d_backward_weight(&dy, &x, &spec);
        assert!((lhs - dot(&x, &dx)).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - dot(&w, &dwt)).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}

#[test]
fn pointwise_ops_match_naive() {
    let mut r = rng(14);
    let x = Tensor::<f64>::randn([2, 3, 4, 5], 2.0, &mut r);
    let y = Tensor::<f64>::randn([2, 3, 4, 5], 2.0, &mut r);
    let bn = random_bn(3, &mut r);
    assert!(max_diff(&ops::silu(&x), &naive_silu(&x)) < 1e-12);
    assert!(max_diff(&ops::add(&x, &y).unwrap(), &naive_add(&x, &y)) < 1e-12);
    assert!(max_diff(&ops::batchnorm_infer(&x, &bn).unwrap(), &naive_bn(&x, &bn)) < 1e-12);
    assert_eq!(ops::upsample_nearest2x(&x), naive_upsample(&x));
    assert_eq!(ops::concat_channels(&[&x, &y]).unwrap(), naive_concat(&[&x, &y]));
}

#[test]
fn silu_reference_values() {
    let x = Tensor::<f64>::vector(vec![0.0, 1.0, -20.0]);
    let y = ops::silu(&x);
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 0.731_058_578_6).abs() < 1e-9);
    assert!(y.data()[2].abs() < 1e-7);
}

#[test]
fn concat_rejects_mismatched_height() {
    let a = Tensor::<f32>::zeros([1, 2, 4, 4]);
    let b = Tensor::<f32>::zeros([1, 3, 5, 4]);
    assert!(ops::concat_channels(&[&a, &b]).is_err());
    assert!(ops::split_channels(&a, &[1, 2]).is_err());
}

#[test]
fn tape_forward_agrees_with_kernels() {
    let mut r = rng(15);
    let spec = ConvSpec::new(3, 4, 3).stride(2).bias(true);
    let x = Tensor::<f64>::randn([1, 3, 8, 8], 1.0, &mut r);
    let w = Tensor::randn(spec.weight_shape(), 1.0, &mut r);
    let b = Tensor::<f64>::vector((0..4).map(|i| i as f64 * 0.3 - 0.5).collect());
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.leaf(x.clone(), true),
        tape.leaf(w.clone(), true),
        tape.leaf(b.clone(), true),
    );
    let y = tape.conv2d(xv, wv, Some(bv), &spec).unwrap();
    assert_eq!(tape.value(y), &ops::conv2d(&x, &w, Some(b.data()), &spec).unwrap());
}

fn tensor(shape: [usize; 4]) -> impl Strategy<Value = Tensor<f64>> {
    let n = shape.iter().product::<usize>();
    proptest::collection::vec(-3.0f64..3.0, n).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_its_input(
        x1 in tensor([1, 2, 6, 6]),
        x2 in tensor([1, 2, 6, 6]),
        w in tensor([3, 2, 3, 3]),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        stride in 1usize..=2,
    ) {
        let spec = ConvSpec::new(2, 3, 3).stride(stride);
        let mixed = Tensor::from_fn(x1.shape(), |i| a * x1.at(i) + b * x2.at(i));
        let lhs = ops::conv2d(&mixed, &w, None, &spec).unwrap();
        let y1 = ops::conv2d(&x1, &w, None, &spec).unwrap();
        let y2 = ops::conv2d(&x2, &w, None, &spec).unwrap();
        let rhs = Tensor::from_fn(lhs.shape(), |i| a * y1.at(i) + b * y2.at(i));
        let scale = lhs.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5 * scale);
    }

    #[test]
    fn split_then_concat_is_exact(sizes in proptest::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
        let c: usize = sizes.iter().sum();
        let x = Tensor::<f32>::randn([2, c, 3, 2], 1.0, &mut rng(seed));
        let parts = ops::split_channels(&x, &sizes).unwrap();
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        prop_assert_eq!(ops::concat_channels(&refs).unwrap(), x.clone());
        for (p, &s) in parts.iter().zip(&sizes) {
            prop_assert_eq!(p.shape().c(), s);
        }
    }

    #[test]
    fn average_pool_inverts_upsample(x in tensor([2, 3, 3, 4])) {
        let back = ops::avg_pool2x2(&ops::upsample_nearest2x(&x));
        prop_assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn depthwise_conv_matches_naive(k in prop::sample::select(vec![1usize, 3, 5, 7, 9]), stride in 1usize..=2, seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = ConvSpec::depthwise(3, k).stride(stride);
        let x = Tensor::<f64>::randn([1, 3, 10, 9], 1.0, &mut r);
        let w = Tensor::randn(spec.weight_shape(), 1.0, &mut r);
        prop_assert!(ops::conv2d(&x, &w, None, &spec).unwrap().max_abs_diff(&naive_conv(&x, &w, None, &spec)) < 1e-10);
    }
}
