mod common;

use common::rng;
use mafyolo::autograd::ForwardMode;
use mafyolo::erf::{erf_map, erf_radius, DwStack, ErfMap};
use mafyolo::model::{Model, ModelConfig};
use mafyolo::nn::{Conv, Layer};
use mafyolo::ops::ConvSpec;
use mafyolo::tensor::Tensor;
use proptest::prelude::*;

fn conv_stack(depth: usize, seed: u64) -> Vec<Conv<f64>> {
    let mut r = rng(seed);
    (0..depth)
        .map(|_| Conv::new(ConvSpec::new(2, 2, 3), &mut r).unwrap())
        .collect()
}

fn stack_map(stack: &[Conv<f64>], side: usize) -> ErfMap {
    erf_map(&Tensor::<f64>::ones([1, 2, side, side]), |tape, x| {
        let mut h = x;
        for c in stack {
            h = c.forward(tape, h)?;
        }
        Ok(h)
    })
    .unwrap()
}

#[test]
fn single_conv_support_is_its_kernel() {
    let map = stack_map(&conv_stack(1, 70), 11);
    assert_eq!(map.centre(), (5, 5));
    assert_eq!(map.support(), Some((4, 4, 6, 6)));
    assert!((map.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(map.data.iter().all(|&v| v >= 0.0));
}

#[test]
fn two_convs_support_is_five_by_five() {
    let map = stack_map(&conv_stack(2, 71), 12);
    assert_eq!(map.centre(), (6, 6));
    assert_eq!(map.support(), Some((4, 4, 8, 8)));
}

#[test]
fn radius_reference_values() {
    let mut dirac = ErfMap {
        height: 9,
        width: 9,
        data: vec![0.0; 81],
    };
    dirac.data[4 * 9 + 4] = 1.0;
    assert_eq!(erf_radius(&dirac, 0.95), 0.0);
    let uniform = ErfMap {
        height: 9,
        width: 9,
        data: (0..81)
            .map(|i| {
                if (3..6).contains(&(i / 9)) && (3..6).contains(&(i % 9)) {
                    1.0 / 9.0
                } else {
                    0.0
                }
            })
            .collect(),
    };
    assert_eq!(erf_radius(&uniform, 0.95), 1.0);
}

#[test]
fn large_kernel_stack_reaches_further() {
    let ones = Tensor::<f32>::ones([1, 4, 64, 64]);
    let radius = |k: usize| {
        let mut stack = DwStack::<f32>::new(4, k, 4, &mut rng(72)).unwrap();
        stack.fuse().unwrap();
        let map = erf_map(&ones, |tape, x| {
            tape.mode = ForwardMode {
                fused: true,
                ..Default::default()
            };
            stack.forward(tape, x)
        })
        .unwrap();
        erf_radius(&map, 0.95)
    };
    let (small, large) = (radius(3), radius(9));
    assert!(large > small, "9x9 radius {large} vs 3x3 radius {small}");
    assert!(small <= 4.0 && large <= 16.0);
}

#[test]
fn fused_and_branch_maps_agree() {
    let ones = Tensor::<f64>::ones([1, 3, 32, 32]);
    let mut stack = DwStack::<f64>::new(3, 7, 2, &mut rng(73)).unwrap();
    stack.randomize_bn(&mut rng(74));
    let train = erf_map(&ones, |tape, x| stack.forward(tape, x)).unwrap();
    stack.fuse().unwrap();
    let fused = erf_map(&ones, |tape, x| {
        tape.mode.fused = true;
        stack.forward(tape, x)
    })
    .unwrap();
    let dev = train
        .data
        .iter()
        .zip(&fused.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(dev < 1e-12);
}

#[test]
fn unknown_tap_is_rejected() {
    let mut cfg = ModelConfig::nano();
    cfg.stage_widths = vec![4, 4, 4, 4];
    cfg.neck.widths = [4, 4, 4];
    cfg.stem = 4;
    let m = Model::<f32>::build(&cfg).unwrap();
    assert!(m.erf("p9", &Tensor::ones([1, 3, 32, 32])).is_err());
}

fn random_map(side: usize, spread: usize, values: &[f64]) -> ErfMap {
    let c = side / 2;
    let mut data = vec![0.0; side * side];
    let mut it = values.iter().cycle();
    for y in c - spread..=c + spread {
        for x in c - spread..=c + spread {
            data[y * side + x] = *it.next().unwrap();
        }
    }
    ErfMap {
        height: side,
        width: side,
        data,
    }
}

proptest! {
    #[test]
    fn radius_bounded_by_support(spread in 0usize..6, values in proptest::collection::vec(0.01f64..1.0, 1..40), mass in 0.5f64..1.0) {
        let map = random_map(15, spread, &values);
        prop_assert!(erf_radius(&map, mass) <= spread as f64);
    }

    #[test]
    fn dilating_a_map_scales_its_radius(spread in 0usize..4, values in proptest::collection::vec(0.01f64..1.0, 1..20), mass in 0.5f64..1.0) {
        let map = random_map(9, spread, &values);
        let mut wide = ErfMap { height: 17, width: 17, data: vec![0.0; 289] };
        for y in 0..9 {
            for x in 0..9 {
                wide.data[(2 * y) * 17 + 2 * x] = map.at(y, x);
            }
        }
        prop_assert_eq!(wide.centre(), (8, 8));
        prop_assert_eq!(erf_radius(&wide, mass), 2.0 * erf_radius(&map, mass));
        prop_assert!(erf_radius(&wide, mass) >= erf_radius(&map, mass));
    }
}
