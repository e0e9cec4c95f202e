//! Finite-difference check of every backward rule, then the same check with
//! one rule deliberately corrupted.

use mafyolo::autograd::OpKind;
use mafyolo::gradcheck::{self, GradcheckConfig};

fn main() -> mafyolo::error::Result<()> {
    let report = gradcheck::run(&["all"], &GradcheckConfig::default())?;
    print!("{}", report.table());

    let corrupt = GradcheckConfig {
        corrupt: Some(OpKind::Silu),
        ..Default::default()
    };
    let report = gradcheck::run(&["silu", "add", "bottleneck"], &corrupt)?;
    println!("\nwith the silu rule scaled by 1.01: failures {:?}", report.failures());
    Ok(())
}
