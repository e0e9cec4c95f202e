//! The two-pathway neck over P2..P5: wiring, lineage and output shapes, with
//! and without the assisted fusion lanes.

use mafyolo::autograd::Tape;
use mafyolo::mafpn::{Mafpn, NeckConfig};
use mafyolo::nn::Layer;
use mafyolo::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mafyolo::error::Result<()> {
    let backbone = [32, 64, 128, 256];
    for (saf, aaf) in [(true, true), (false, false)] {
        let cfg = NeckConfig {
            widths: [64, 128, 256],
            enable_saf: saf,
            enable_aaf: aaf,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let neck = Mafpn::<f32>::new(cfg, backbone, &mut rng)?;
        println!("== saf {saf}, aaf {aaf}: {} params", neck.param_count());
        print!("{}", neck.wiring_text());
        println!("lineage N3..N5: {:?}", neck.lineage());

        let mut tape = Tape::new();
        let taps: Vec<_> = (0..4)
            .map(|i| tape.constant(Tensor::randn([1, backbone[i], 64 >> i, 64 >> i], 1.0, &mut rng)))
            .collect();
        let outs = neck.forward(&mut tape, [taps[0], taps[1], taps[2], taps[3]])?;
        let shapes: Vec<String> = outs.iter().map(|&o| tape.shape(o).to_string()).collect();
        println!("outputs {}\n", shapes.join(" "));
    }
    Ok(())
}
