//! Builds a 7x7 RepHDW unit with 5x5 and 3x3 branches, merges it into one
//! depthwise kernel and compares the two graphs on a random input.

use mafyolo::autograd::{OpKind, Tape};
use mafyolo::nn::Layer;
use mafyolo::rep_conv::RepHDWConv;
use mafyolo::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mafyolo::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut unit = RepHDWConv::<f32>::with_default_branches(16, 7, &mut rng)?;
    unit.randomize_bn(&mut rng);
    println!(
        "branches {:?}",
        unit.branches.iter().map(|b| b.kernel).collect::<Vec<_>>()
    );
    println!(
        "params: training {} -> fused {}",
        unit.train_param_count(),
        unit.fused_param_count()
    );

    unit.fuse()?;
    let x = Tensor::<f32>::randn([2, 16, 16, 16], 1.0, &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let before = tape.op_count(OpKind::Conv2d);
    let train = unit.forward_train(&mut tape, v)?;
    let mid = tape.op_count(OpKind::Conv2d);
    let fused = unit.forward_fused(&mut tape, v)?;
    println!(
        "convolutions: training {}, fused {}",
        mid - before,
        tape.op_count(OpKind::Conv2d) - mid
    );
    println!(
        "max |train - fused| = {:.3e}",
        tape.value(train).max_abs_diff(tape.value(fused))
    );

    let (w, _) = unit.merged()?;
    println!("merged kernel, channel 0:");
    for y in 0..7 {
        let row: Vec<String> = (0..7).map(|x| format!("{:7.3}", w.at([0, 0, y, x]))).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
