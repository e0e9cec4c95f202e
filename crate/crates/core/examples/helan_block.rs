//! One RepHELAN block: split, bottleneck chain, retained lanes, output
//! projection. Prints the traced widths and how the toggles reshape it.

use mafyolo::autograd::Tape;
use mafyolo::blocks::{Helan, HelanConfig};
use mafyolo::nn::Layer;
use mafyolo::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mafyolo::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = HelanConfig::new(32, 64, 7);
    let block = Helan::<f32>::new(cfg.clone(), &mut rng)?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn([1, 32, 20, 20], 1.0, &mut rng));
    let t = block.forward_traced(&mut tape, x)?;
    println!("split halves {} + {}", tape.shape(t.split.0), tape.shape(t.split.1));
    for (i, c) in t.chain.iter().enumerate() {
        println!("bottleneck {i} -> {}", tape.shape(*c));
    }
    println!("concat {} -> out {}", tape.shape(t.concat), tape.shape(t.out));

    println!("\n{:<34} {:>8} {:>8} depthwise kernels", "toggles", "params", "concat");
    for (elan, large, rep) in [
        (false, false, false),
        (true, false, false),
        (true, true, false),
        (true, true, true),
    ] {
        let c = HelanConfig {
            use_elan: elan,
            use_large: large,
            use_rep: rep,
            ..cfg.clone()
        };
        let b = Helan::<f32>::new(c.clone(), &mut rng)?;
        let dws: Vec<_> = b
            .inventory()
            .into_iter()
            .filter(|r| r.is_depthwise())
            .map(|r| r.branch_kernels)
            .collect();
        println!(
            "{:<34} {:>8} {:>8} {dws:?}",
            format!("elan={elan} large={large} rep={rep}"),
            b.param_count(),
            c.concat_width()
        );
    }
    Ok(())
}
