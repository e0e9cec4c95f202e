//! Saves a model (with fused weights), loads it into a differently seeded
//! copy and checks the bytes and outputs match.

use mafyolo::model::{Model, ModelConfig};
use mafyolo::nn::Layer;
use mafyolo::tensor::Tensor;
use mafyolo::weights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mafyolo::error::Result<()> {
    let cfg = ModelConfig::nano();
    let mut model = Model::<f32>::build(&cfg)?;
    model.fuse()?;
    let path = std::env::temp_dir().join("mafyolo_nano.mafw");
    weights::save(&model, &path)?;
    let bytes = std::fs::read(&path)?;
    let list = weights::decode(&bytes)?;
    println!("{} entries, {} bytes", list.len(), bytes.len());
    for e in list.iter().take(5) {
        println!("  {:<40} {:?}", e.name, e.dims);
    }

    let mut copy = Model::<f32>::build(&ModelConfig { seed: 42, ..cfg })?;
    weights::load(&mut copy, &path)?;
    println!("re-save identical: {}", weights::to_bytes(&copy) == bytes);
    let x = Tensor::<f32>::randn([1, 3, 128, 128], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    println!(
        "fused outputs identical: {}",
        model.infer(&x, true)? == copy.infer(&x, true)?
    );

    match weights::decode(&bytes[..bytes.len() / 3]) {
        Err(e) => println!("truncated file: {e}"),
        Ok(_) => println!("truncated file decoded?"),
    }
    Ok(())
}
