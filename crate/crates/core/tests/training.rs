use kcr_core::data::{AugmentParams, Dataset, Sample};
use kcr_core::model::{ModelConfig, SequentialModel};
use kcr_core::train::{self, TrainConfig};
use kcr_core::{Rng, Tensor};

fn noise_set(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let samples = (0..n)
        .map(|i| Sample {
            image: Tensor::from_fn([12, 12, 1], |_| rng.uniform_range(0.0, 255.0) as f32).unwrap(),
            label: i % 2,
            source_path: format!("noise/{i}").into(),
        })
        .collect();
    Dataset { class_names: vec!["a".into(), "b".into()], samples }
}

// The validation set is the training set, so val_loss is the training loss with dropout off.
#[test]
fn overfit_loss_settles() {
    let set = noise_set(8, 21);
    let mut model = SequentialModel::build(ModelConfig::with_head(&[8, 16], 64, [12, 12, 1], 2), 5).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        augment: AugmentParams::disabled(),
        seed: 5,
        ..Default::default()
    };
    let out = train::train(&mut model, &set, &set, &cfg).unwrap();
    assert_eq!(out.history.len(), 200);
    for w in out.history[19..].windows(2) {
        assert!(
            w[1].val_loss <= w[0].val_loss + 0.05,
            "training-set loss rose from {} to {} at epoch {}",
            w[0].val_loss,
            w[1].val_loss,
            w[1].epoch
        );
    }
    let last = out.history.last().unwrap();
    assert!(last.val_loss < 0.01 && last.train_loss < out.history[0].train_loss);
}

#[test]
fn metrics_rows_match_completed_epochs() {
    let set = noise_set(6, 4);
    let mut model = SequentialModel::build(ModelConfig::with_head(&[4], 8, [12, 12, 1], 2), 0).unwrap();
    let cfg = TrainConfig { epochs: 4, batch_size: 3, record_time: false, ..Default::default() };
    let out = train::train(&mut model, &set, &set, &cfg).unwrap();
    let mut csv = Vec::new();
    train::write_metrics_csv(&out.history, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + out.history.len());
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0.000")));
}
