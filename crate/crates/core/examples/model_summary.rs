//! Per-layer parameter and MAC tables for the nano network, before and after
//! reparameterization.

use mafyolo::model::{Model, ModelConfig};

fn main() -> mafyolo::error::Result<()> {
    let size = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(640);
    let model = Model::<f32>::build(&ModelConfig::nano())?;
    let train = model.costs((size, size), false)?;
    let fused = model.costs((size, size), true)?;
    print!("{}", fused.table());
    println!(
        "\ntraining graph {:.3}M params {:.3} GFLOPs; fused {:.3}M params {:.3} GFLOPs",
        train.total_params as f64 / 1e6,
        train.total_flops as f64 / 1e9,
        fused.total_params as f64 / 1e6,
        fused.total_flops as f64 / 1e9
    );
    println!(
        "backbone kernels {:?}, neck kernels {:?}",
        model.backbone_kernels(),
        model.neck_kernels()
    );
    Ok(())
}
