//! Mini-batch training with ADAM, per-epoch metrics, early stopping and
//! best-weight checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{augment, epoch_order, AugmentParams, Dataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{accuracy, sparse_cce};
use crate::model::{save, stack, SequentialModel};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Rng, Tensor};

const SHUFFLE_STREAM: u64 = 0x5401;
const AUGMENT_STREAM: u64 = 0x5402;
const DROPOUT_STREAM: u64 = 0x5403;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub enabled: bool,
    pub patience: usize,
    pub min_delta: f64,
    /// Leave the best-validation weights in the model when training ends.
    pub restore_best: bool,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            enabled: false,
            patience: 5,
            min_delta: 0.0,
            restore_best: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: AugmentParams,
    pub seed: u64,
    pub early_stopping: EarlyStopping,
    /// Where the best-validation-loss weights are written, if anywhere.
    pub checkpoint_path: Option<PathBuf>,
    /// Record wall-clock seconds per epoch; when off the column is 0.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            augment: AugmentParams::default(),
            seed: 0,
            early_stopping: EarlyStopping::default(),
            checkpoint_path: None,
            record_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.early_stopping.enabled && self.early_stopping.patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if !(self.early_stopping.min_delta >= 0.0) {
            return Err(Error::InvalidArgument("min_delta must be >= 0".into()));
        }
        self.adam.validate()?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.seconds
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    /// 1-based epoch with the lowest validation loss.
    Stop { best_epoch: usize },
}

/// 1-based epoch of the minimum validation loss, ties to the earliest.
pub fn best_epoch(history: &[MetricsRow]) -> Option<usize> {
    let mut best: Option<&MetricsRow> = None;
    for row in history {
        if best.is_none_or(|b| row.val_loss < b.val_loss) {
            best = Some(row);
        }
    }
    best.map(|r| r.epoch)
}

/// Stops once the validation loss has gone `patience` consecutive epochs
/// without improving on the best so far by more than `min_delta`.
pub fn early_stop_check(history: &[MetricsRow], patience: usize, min_delta: f64) -> StopDecision {
    let Some(first) = history.first() else {
        return StopDecision::Continue;
    };
    let mut reference = first.val_loss;
    let mut waited = 0;
    for row in &history[1..] {
        if row.val_loss < reference - min_delta {
            reference = row.val_loss;
            waited = 0;
        } else {
            waited += 1;
        }
    }
    if waited >= patience {
        StopDecision::Stop {
            best_epoch: best_epoch(history).unwrap_or(first.epoch),
        }
    } else {
        StopDecision::Continue
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<MetricsRow>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean loss and accuracy of inference-mode predictions over `data`.
pub fn evaluate_loss(model: &SequentialModel<f32>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let chunks: Vec<&[crate::data::Sample]> = data.samples.chunks(batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
            let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
            let probs = model.predict(&stack(&images)?)?;
            if !probs.is_finite() {
                return Err(Error::NonFinite("validation predictions".into()));
            }
            let n = labels.len() as f64;
            Ok((sparse_cce(&probs, &labels)?.value * n, accuracy(&probs, &labels)? * n))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, acc) = parts.iter().fold((0.0, 0.0), |(l, a), (pl, pa)| (l + pl, a + pa));
    let n = data.len() as f64;
    Ok((loss / n, acc / n))
}

fn check_compatible(model: &SequentialModel<f32>, set: &Dataset, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Dataset(format!("{what} set is empty")));
    }
    let want = model.config().input_shape;
    if let Some(dims) = set.image_dims() {
        if dims != want {
            return Err(Error::Shape(format!(
                "{what} images are {dims:?} but the model expects {want:?}"
            )));
        }
    }
    if set.num_classes() != model.num_classes() {
        return Err(Error::Shape(format!(
            "{what} set has {} classes but the model has {}",
            set.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Trains `model` in place. The returned history has one row per completed
/// epoch. Shuffling, augmentation and dropout draw from streams derived from
/// `cfg.seed` and the epoch number, so a shorter run is a prefix of a longer one.
pub fn train(
    model: &mut SequentialModel<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model, train_set, val_set, cfg, |_| {})
}

/// [`train`], calling `on_epoch` after every completed epoch.
pub fn train_with_progress(
    model: &mut SequentialModel<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(model, train_set, "training")?;
    check_compatible(model, val_set, "validation")?;

    let mut adam = Adam::new(cfg.adam)?;
    let mut history: Vec<MetricsRow> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, SequentialModel<f32>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let e = epoch as u64;
        let order = epoch_order(train_set.len(), true, &mut Rng::derive(cfg.seed, SHUFFLE_STREAM, e));
        let mut dropout_rng = Rng::derive(cfg.seed, DROPOUT_STREAM, e);
        let (mut loss_sum, mut correct_sum) = (0.0, 0.0);

        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let images = idx
                .par_iter()
                .map(|&i| {
                    let img = &train_set.samples[i].image;
                    if cfg.augment.enabled {
                        let stream = e << 32 | i as u64;
                        augment(img, &cfg.augment, &mut Rng::derive(cfg.seed, AUGMENT_STREAM, stream))
                    } else {
                        Ok(img.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.samples[i].label).collect();
            let batch = stack(&images.iter().collect::<Vec<_>>())?;

            let probs = model.forward(&batch, Mode::Train, &mut dropout_rng)?;
            if !probs.is_finite() {
                return Err(Error::Diverged { epoch, batch: b + 1 });
            }
            let loss = sparse_cce(&probs, &labels)?.value;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b + 1 });
            }
            let n = labels.len() as f64;
            loss_sum += loss * n;
            correct_sum += accuracy(&probs, &labels)? * n;

            model.backward(&labels)?;
            match adam.step(&mut model.params_mut()) {
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, batch: b + 1 }),
                other => other?,
            }
        }

        let (val_loss, val_acc) = evaluate_loss(model, val_set, cfg.batch_size)?;
        let n = train_set.len() as f64;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct_sum / n,
            val_loss,
            val_acc,
            seconds: if cfg.record_time { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        history.push(row);
        on_epoch(&row);

        if best.as_ref().is_none_or(|(l, _)| val_loss < *l) {
            best = Some((val_loss, model.clone()));
            if let Some(path) = &cfg.checkpoint_path {
                save(model, path)?;
            }
        }
        let es = &cfg.early_stopping;
        if es.enabled && epoch < cfg.epochs {
            if let StopDecision::Stop { .. } = early_stop_check(&history, es.patience, es.min_delta) {
                stopped_early = true;
                break;
            }
        }
    }

    if cfg.early_stopping.enabled && cfg.early_stopping.restore_best {
        if let Some((_, weights)) = &best {
            model.copy_params_from(weights)?;
        }
    }
    Ok(TrainOutcome {
        best_epoch: best_epoch(&history).unwrap_or(1),
        history,
        stopped_early,
    })
}

pub fn write_metrics_csv(rows: &[MetricsRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.csv_line())?;
    }
    Ok(())
}

pub fn save_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_csv(rows, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::model::ModelConfig;

    fn rows(losses: &[f64]) -> Vec<MetricsRow> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &l)| MetricsRow {
                epoch: i + 1,
                train_loss: l,
                train_acc: 0.5,
                val_loss: l,
                val_acc: 0.5,
                seconds: 0.0,
            })
            .collect()
    }

    #[test]
    fn early_stop_examples() {
        let h = rows(&[1.0, 0.9, 0.8, 0.7, 0.6]);
        for n in 1..=h.len() {
            assert_eq!(early_stop_check(&h[..n], 1, 0.0), StopDecision::Continue);
        }
        let h = rows(&[1.0, 0.9, 0.91, 0.92, 0.93]);
        assert_eq!(early_stop_check(&h[..4], 3, 0.0), StopDecision::Continue);
        assert_eq!(early_stop_check(&h, 3, 0.0), StopDecision::Stop { best_epoch: 2 });
        let flat = rows(&[0.5, 0.5 - 1e-4, 0.5 + 1e-4]);
        assert_eq!(early_stop_check(&flat[..1], 1, 1e-3), StopDecision::Continue);
        assert_eq!(early_stop_check(&flat[..2], 1, 1e-3), StopDecision::Stop { best_epoch: 2 });
    }

    #[test]
    fn best_epoch_prefers_earliest_tie() {
        assert_eq!(best_epoch(&rows(&[0.3, 0.2, 0.2, 0.4])), Some(2));
        assert_eq!(best_epoch(&[]), None);
    }

    #[test]
    fn metrics_csv_format() {
        let mut buf = Vec::new();
        write_metrics_csv(&rows(&[0.25]), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,train_acc,val_loss,val_acc,seconds\n1,0.250000,0.500000,0.250000,0.500000,0.000\n"
        );
    }

    fn bars(n_per_class: usize) -> Dataset {
        let mut samples = Vec::new();
        for label in 0..2 {
            for i in 0..n_per_class {
                let img = Tensor::from_fn([6, 6, 1], |p| {
                    let (y, x) = (p / 6, p % 6);
                    let on = if label == 0 { x == 1 + i % 3 } else { y == 1 + i % 3 };
                    if on { 255.0 } else { 0.0 }
                })
                .unwrap();
                samples.push(Sample { image: img, label, source_path: format!("{label}/{i}").into() });
            }
        }
        Dataset { class_names: vec!["v".into(), "h".into()], samples }
    }

    fn tiny_model() -> SequentialModel<f32> {
        SequentialModel::build(ModelConfig::with_head(&[4], 8, [6, 6, 1], 2), 3).unwrap()
    }

    #[test]
    fn one_epoch_one_row_and_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = tmp.path().join("m.kcm");
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            checkpoint_path: Some(ckpt.clone()),
            ..Default::default()
        };
        let data = bars(6);
        let mut model = tiny_model();
        let out = train(&mut model, &data, &data, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(ckpt.exists());
    }

    #[test]
    fn runs_are_reproducible_and_prefix_stable() {
        let data = bars(6);
        let cfg = |epochs| TrainConfig {
            epochs,
            batch_size: 4,
            record_time: false,
            seed: 9,
            ..Default::default()
        };
        let (mut a, mut b, mut c) = (tiny_model(), tiny_model(), tiny_model());
        let ha = train(&mut a, &data, &data, &cfg(4)).unwrap().history;
        let hb = train(&mut b, &data, &data, &cfg(4)).unwrap().history;
        let hc = train(&mut c, &data, &data, &cfg(2)).unwrap().history;
        assert_eq!(ha, hb);
        assert_eq!(a.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>(),
                   b.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>());
        assert_eq!(&ha[..2], &hc[..]);
    }

    #[test]
    fn checkpoint_holds_best_weights() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = tmp.path().join("best.kcm");
        let data = bars(6);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 4,
            adam: AdamConfig { lr: 0.05, ..Default::default() },
            checkpoint_path: Some(ckpt.clone()),
            ..Default::default()
        };
        let mut model = tiny_model();
        let out = train(&mut model, &data, &data, &cfg).unwrap();
        let best = &out.history[out.best_epoch - 1];
        let reloaded = crate::model::load(&ckpt).unwrap();
        let (loss, acc) = evaluate_loss(&reloaded, &data, 4).unwrap();
        assert!((loss - best.val_loss).abs() < 1e-9, "{loss} vs {}", best.val_loss);
        assert_eq!(acc, best.val_acc);
    }

    #[test]
    fn early_stopping_restores_best() {
        let data = bars(6);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            adam: AdamConfig { lr: 0.3, ..Default::default() },
            early_stopping: EarlyStopping { enabled: true, patience: 2, ..Default::default() },
            ..Default::default()
        };
        let mut model = tiny_model();
        let out = train(&mut model, &data, &data, &cfg).unwrap();
        assert!(out.stopped_early && out.history.len() < 50);
        let (loss, _) = evaluate_loss(&model, &data, 4).unwrap();
        assert_eq!(loss, out.history[out.best_epoch - 1].val_loss);
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = bars(3);
        let mut model = tiny_model();
        let zero = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train(&mut model, &data, &data, &zero), Err(Error::InvalidArgument(_))));
        let mut wrong = SequentialModel::build(ModelConfig::with_head(&[4], 8, [8, 8, 1], 2), 0).unwrap();
        assert!(matches!(
            train(&mut wrong, &data, &data, &TrainConfig::default()),
            Err(Error::Shape(_))
        ));
    }
}
