//! Trains the reduced-width classifier on two-scale Gaussian blobs with
//! plain SGD and prints the loss curve.

use mafyolo::train::{self, Dataset, ToyClassifier, ToyConfig};

fn main() -> mafyolo::error::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let cfg = ToyConfig {
        steps,
        ..Default::default()
    };
    let data = Dataset::blobs(&cfg);
    let mut model = ToyClassifier::<f32>::new(&train::toy_model_config(cfg.seed), 2)?;
    let report = train::train_toy(&mut model, &data, cfg.steps, cfg.lr, |step, loss, acc| {
        if step % 10 == 0 {
            println!("step {step:>4}  loss {loss:.5}  acc {acc:.3}");
        }
    })?;
    println!(
        "final loss {:.5}, train acc {:.3}, eval acc {:.3}, 95% reached at step {:?}",
        report.final_loss,
        report.final_accuracy,
        report.eval_accuracy,
        report.first_step_reaching(0.95)
    );
    Ok(())
}
