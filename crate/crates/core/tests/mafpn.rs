mod common;

use std::collections::BTreeSet;

use common::*;
use mafyolo::autograd::{Tape, Var};
use mafyolo::blocks::HelanStyle;
use mafyolo::mafpn::{FusionNode, Lane, LaneOp, Mafpn, NeckConfig, Source};
use mafyolo::model::ModelConfig;
use mafyolo::nn::Layer;
use mafyolo::tensor::Tensor;

fn neck(saf: bool, aaf: bool, seed: u64) -> Mafpn<f64> {
    let cfg = NeckConfig {
        widths: [8, 12, 16],
        enable_saf: saf,
        enable_aaf: aaf,
        block: HelanStyle {
            n_bottlenecks: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    Mafpn::new(cfg, [4, 6, 10, 14], &mut rng(seed)).unwrap()
}

fn pyramid(tape: &mut Tape<f64>, widths: [usize; 4], p2: usize, seed: u64) -> [Var; 4] {
    let mut r = rng(seed);
    let v: Vec<Var> = (0..4)
        .map(|i| tape.constant(Tensor::randn([1, widths[i], p2 >> i, p2 >> i], 1.0, &mut r)))
        .collect();
    v.try_into().unwrap()
}

fn ref_lane(lane: &Lane<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    match &lane.op {
        LaneOp::Identity => x.clone(),
        LaneOp::Up => naive_upsample(x),
        LaneOp::UpProject(c) => ref_convbn(&naive_upsample(x), c),
        LaneOp::DownProject { down, proj } => ref_convbn(&ref_convbn(x, down), proj),
        LaneOp::Project(c) => ref_convbn(x, c),
    }
}

fn ref_node(node: &FusionNode<f64>, inputs: &[Tensor<f64>]) -> Tensor<f64> {
    let lanes: Vec<Tensor<f64>> = node.lanes.iter().zip(inputs).map(|(l, x)| ref_lane(l, x)).collect();
    let refs: Vec<&Tensor<f64>> = lanes.iter().collect();
    let cat = naive_concat(&refs);
    match &node.helan {
        Some(h) => ref_helan(&cat, h),
        None => cat,
    }
}

#[test]
fn saf_concat_shape_with_half_assist() {
    let style = HelanStyle::default();
    let node = FusionNode::<f32>::saf(4, 32, 64, 128, Some(32), 64, 7, &style, &mut rng(50)).unwrap();
    let mut r = rng(51);
    let mut tape = Tape::new();
    let inputs = [
        tape.constant(Tensor::randn([1, 32, 80, 80], 1.0, &mut r)),
        tape.constant(Tensor::randn([1, 64, 40, 40], 1.0, &mut r)),
        tape.constant(Tensor::randn([1, 128, 20, 20], 1.0, &mut r)),
    ];
    let cat = node.fuse(&mut tape, &inputs).unwrap();
    assert_eq!(tape.shape(cat).0, [1, 224, 40, 40]);
    assert_eq!(node.concat_width(), 224);
}

#[test]
fn zeroed_assist_lane_is_isolated() {
    let style = HelanStyle::default();
    let mut node = FusionNode::<f64>::saf(4, 8, 6, 10, Some(3), 8, 7, &style, &mut rng(52)).unwrap();
    node.randomize_bn(&mut rng(53));
    let LaneOp::DownProject { proj, .. } = &mut node.lanes[0].op else {
        panic!("assist lane must downsample");
    };
    proj.conv.weight.value = proj.conv.weight.value.map(|_| 0.0);
    let bn = proj.bn.params();
    let mut r = rng(54);
    let (a, b, c) = (
        Tensor::<f64>::randn([1, 8, 12, 12], 1.0, &mut r),
        Tensor::<f64>::randn([1, 6, 6, 6], 1.0, &mut r),
        Tensor::<f64>::randn([1, 10, 3, 3], 1.0, &mut r),
    );
    let mut tape = Tape::new();
    let inputs = [tape.constant(a), tape.constant(b.clone()), tape.constant(c.clone())];
    let cat = node.fuse(&mut tape, &inputs).unwrap();
    let cat = tape.value(cat).clone();
    let assist = naive_narrow(&cat, 0, 3);
    for ch in 0..3 {
        let shift = bn.beta[ch] - bn.gamma[ch] * bn.running_mean[ch] / (bn.running_var[ch] + bn.eps).sqrt();
        let expect = shift / (1.0 + (-shift).exp());
        for y in 0..6 {
            for x in 0..6 {
                assert!((assist.at([0, ch, y, x]) - expect).abs() < 1e-12);
            }
        }
    }
    assert_eq!(naive_narrow(&cat, 3, 6), b);
    assert_eq!(naive_narrow(&cat, 9, 10), naive_upsample(&c));
}

#[test]
fn saf_shapes_follow_a_level_shift() {
    let style = HelanStyle::default();
    let shapes = |level: u8, side: usize| {
        let node = FusionNode::<f32>::saf(level, 4, 6, 8, Some(3), 5, 5, &style, &mut rng(55)).unwrap();
        let mut tape = Tape::new();
        let mut r = rng(56);
        let inputs = [
            tape.constant(Tensor::randn([1, 4, 2 * side, 2 * side], 1.0, &mut r)),
            tape.constant(Tensor::randn([1, 6, side, side], 1.0, &mut r)),
            tape.constant(Tensor::randn([1, 8, side / 2, side / 2], 1.0, &mut r)),
        ];
        let y = node.forward(&mut tape, &inputs).unwrap();
        tape.shape(y).0
    };
    let low = shapes(3, 16);
    let high = shapes(4, 8);
    assert_eq!(low[..2], high[..2]);
    assert_eq!([low[2] / 2, low[3] / 2], [high[2], high[3]]);
}

#[test]
fn spatial_violation_names_the_level() {
    let style = HelanStyle::default();
    let node = FusionNode::<f32>::saf(4, 4, 6, 8, Some(3), 5, 5, &style, &mut rng(57)).unwrap();
    let mut tape = Tape::new();
    let inputs = [
        tape.constant(Tensor::zeros([1, 4, 16, 16])),
        tape.constant(Tensor::zeros([1, 6, 8, 8])),
        tape.constant(Tensor::zeros([1, 8, 8, 8])),
    ];
    let err = node.fuse(&mut tape, &inputs).unwrap_err().to_string();
    assert!(err.contains("P'4"), "{err}");
}

#[test]
fn aaf_lanes_are_equal_width() {
    let style = HelanStyle::default();
    let node = FusionNode::<f32>::aaf(
        4,
        Some(7),
        (Source::BottomUp(3), 9),
        12,
        Some(20),
        12,
        7,
        &style,
        &mut rng(58),
    )
    .unwrap();
    assert_eq!(node.concat_width(), 4 * 12);
    assert!(node.lanes.iter().all(|l| l.out_channels == 12));
    let n = neck(true, true, 59);
    assert_eq!(n.node(Source::BottomUp(4)).unwrap().concat_width(), 4 * 12);
    assert_eq!(n.node(Source::BottomUp(3)).unwrap().concat_width(), 3 * 8);
    assert_eq!(n.node(Source::BottomUp(5)).unwrap().concat_width(), 3 * 16);
}

#[test]
fn every_node_matches_manual_composition() {
    for (saf, aaf) in [(true, true), (false, false), (true, false)] {
        let mut n = neck(saf, aaf, 60);
        n.randomize_bn(&mut rng(61));
        let mut tape = Tape::new();
        let taps = pyramid(&mut tape, n.backbone_widths, 16, 62);
        let (env, _) = n.forward_all(&mut tape, taps).unwrap();
        for node in &n.nodes {
            let inputs: Vec<Tensor<f64>> = node.lanes.iter().map(|l| tape.value(env[&l.source]).clone()).collect();
            let got = tape.value(env[&node.target]);
            assert!(
                max_diff(got, &ref_node(node, &inputs)) < 1e-10,
                "{} saf {saf} aaf {aaf}",
                node.target
            );
        }
    }
}

#[test]
fn wiring_matches_golden_file() {
    let cfg = ModelConfig::nano();
    let n = Mafpn::<f32>::new(cfg.neck, [48, 96, 192, 256], &mut rng(0)).unwrap();
    let golden = include_str!("golden/wiring.txt");
    assert_eq!(n.wiring_text(), golden);
}

#[test]
fn outputs_see_three_backbone_levels_and_never_p2() {
    let n = neck(true, true, 63);
    for set in n.lineage() {
        assert!(set.len() >= 3, "{set:?}");
    }
    assert!(n.outputs.iter().all(|s| !matches!(s, Source::Backbone(_))));
    for e in n.wiring() {
        if e.kind == "output" {
            assert_ne!(e.src, "P2");
        }
        if e.src == "P2" {
            assert_eq!(e.kind, "assist");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let n = neck(true, true, 64);
        let mut tape = Tape::new();
        let taps = pyramid(&mut tape, n.backbone_widths, 32, 65);
        let outs = n.forward(&mut tape, taps).unwrap();
        outs.map(|o| tape.value(o).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn output_strides_and_widths() {
    let n = neck(true, true, 66);
    let mut tape = Tape::new();
    let taps = pyramid(&mut tape, n.backbone_widths, 64, 67);
    let outs = n.forward(&mut tape, taps).unwrap();
    let shapes: Vec<[usize; 4]> = outs.iter().map(|&o| tape.shape(o).0).collect();
    assert_eq!(shapes, vec![[1, 8, 32, 32], [1, 12, 16, 16], [1, 16, 8, 8]]);
    assert_eq!(n.out_widths(), [8, 12, 16]);
}

#[test]
fn disabled_fusion_degenerates_to_pafpn() {
    let n = neck(false, false, 68);
    let text = n.wiring_text();
    let expect = "\
P5 -> P'5 [project]
P4 -> P'4 [lateral]
P'5 -> P'4 [upsample]
P3 -> P'3 [lateral]
P'4 -> P'3 [upsample]
P'3 -> P''4 [bottom-up]
P'4 -> P''4 [lateral]
P''4 -> P''5 [bottom-up]
P'5 -> P''5 [lateral]
P'3 -> N3 [output]
P''4 -> N4 [output]
P''5 -> N5 [output]
";
    assert_eq!(text, expect);
    assert!(n.lineage().iter().all(|s| !s.contains(&2)));
}

#[test]
fn toggles_remove_only_their_lanes() {
    let edges = |saf, aaf| -> BTreeSet<String> { neck(saf, aaf, 69).wiring().iter().map(|e| e.to_string()).collect() };
    let full = edges(true, true);
    let no_saf = edges(false, true);
    let removed: Vec<&String> = full.difference(&no_saf).collect();
    assert_eq!(removed.len(), 3);
    assert!(removed.iter().all(|e| e.ends_with("[assist]")));
    assert!(no_saf.is_subset(&full));

    let no_aaf = edges(true, false);
    for e in full.difference(&no_aaf) {
        assert!(e.contains("[cross-") || e.contains("P''3"), "unexpected removal {e}");
    }
    for e in no_aaf.difference(&full) {
        // With P''3 gone, P'3 feeds the bottom-up lane and N3 directly.
        assert!(e.starts_with("P'3 -> "), "unexpected addition {e}");
    }
    let parsed = |s: &BTreeSet<String>| s.iter().filter(|e| e.contains("[cross-")).count();
    assert_eq!(parsed(&no_aaf), 0);
    assert_eq!(parsed(&full), 4);
}
