//! Effective receptive fields of depthwise stacks with growing kernels,
//! and of the nano network's N3 output. Maps are written as CSV and PGM.

use mafyolo::erf::{erf_map, erf_radius, DwStack};
use mafyolo::model::{Model, ModelConfig};
use mafyolo::nn::Layer;
use mafyolo::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mafyolo::error::Result<()> {
    let out = std::env::temp_dir().join("mafyolo_erf");
    std::fs::create_dir_all(&out)?;
    let ones = Tensor::<f32>::ones([1, 4, 96, 96]);
    for k in [3, 5, 7, 9] {
        let mut stack = DwStack::<f32>::new(4, k, 4, &mut ChaCha8Rng::seed_from_u64(0))?;
        stack.fuse()?;
        let map = erf_map(&ones, |tape, x| {
            tape.mode.fused = true;
            stack.forward(tape, x)
        })?;
        map.write(&out.join(format!("stack_k{k}")))?;
        println!("depth-4 stack k{k}: 95% radius {}", erf_radius(&map, 0.95));
    }

    let model = Model::<f32>::build(&ModelConfig::nano())?;
    let map = model.erf("n3", &Tensor::ones([1, 3, 256, 256]))?;
    map.write(&out.join("nano_n3"))?;
    println!(
        "nano N3: 95% radius {}, 50% radius {}",
        erf_radius(&map, 0.95),
        erf_radius(&map, 0.5)
    );
    println!("maps in {}", out.display());
    Ok(())
}
