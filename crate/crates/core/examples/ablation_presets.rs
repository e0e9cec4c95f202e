//! Params and FLOPs across the block, neck and component toggle grids.

use mafyolo::ablation::{self, Preset};
use mafyolo::model::ModelConfig;

fn main() -> mafyolo::error::Result<()> {
    let base = ModelConfig::nano();
    for preset in Preset::ALL {
        println!("{}", ablation::run(preset, &base, (640, 640))?.table());
    }
    Ok(())
}
