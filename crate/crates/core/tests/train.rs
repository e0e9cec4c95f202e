use mafyolo::error::Error;
use mafyolo::train::{self, Dataset, ToyClassifier, ToyConfig};

#[test]
fn single_sample_is_memorised() {
    let cfg = ToyConfig::default();
    let data = Dataset::blobs(&cfg).take(1);
    let mut model = ToyClassifier::<f32>::new(&train::toy_model_config(0), 2).unwrap();
    let report = train::train_toy(&mut model, &data, 200, cfg.lr, |_, _, _| {}).unwrap();
    assert_eq!(report.losses.len(), 200);
    assert!(report.final_loss < 0.05, "final loss {}", report.final_loss);
    assert!(report.final_loss < report.losses[0]);
    assert_eq!(report.final_accuracy, 1.0);
}

#[test]
fn zero_learning_rate_is_flat() {
    let data = Dataset::blobs(&ToyConfig::default()).take(4);
    let mut model = ToyClassifier::<f32>::new(&train::toy_model_config(1), 2).unwrap();
    let report = train::train_toy(&mut model, &data, 5, 0.0, |_, _, _| {}).unwrap();
    assert!(report.losses.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn huge_learning_rate_reports_divergence_step() {
    let data = Dataset::blobs(&ToyConfig::default()).take(8);
    let mut model = ToyClassifier::<f32>::new(&train::toy_model_config(2), 2).unwrap();
    match train::train_toy(&mut model, &data, 50, 1e12, |_, _, _| {}) {
        Err(Error::Divergence { step }) => assert!(step < 50),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.final_loss)),
    }
}

#[test]
fn curve_csv_has_one_row_per_step() {
    let data = Dataset::blobs(&ToyConfig::default()).take(2);
    let mut model = ToyClassifier::<f32>::new(&train::toy_model_config(3), 2).unwrap();
    let mut logged = 0;
    let report = train::train_toy(&mut model, &data, 3, 0.01, |_, _, _| logged += 1).unwrap();
    assert_eq!(logged, 3);
    let csv = train::curve_csv(&report);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("step,loss,accuracy\n0,"));
}
