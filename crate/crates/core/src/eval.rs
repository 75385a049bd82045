//! Test-set evaluation: overall and per-class accuracy, the confusion matrix
//! and the most frequent misclassifications.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{stack, SequentialModel};
use crate::tensor::{Real, Rng, Tensor};

const EVAL_BATCH: usize = 64;

/// Anything that maps a batch `[N, H, W, C]` to class probabilities `[N, K]`.
pub trait Classifier: Sync {
    fn predict_probs(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<T: Real> Classifier for SequentialModel<T> {
    fn predict_probs(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict(&batch.cast())?.cast())
    }
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        ConfusionMatrix { class_names, counts: vec![vec![0; k]; k] }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// CSV with a header row and a leading column of class names.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let quote = |s: &str| {
            if s.contains([',', '"', '\n', '\r']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let header: Vec<String> = self.class_names.iter().map(|n| quote(n)).collect();
        writeln!(out, "true\\pred,{}", header.join(","))?;
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(out, "{},{}", quote(name), cells.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub n: u64,
    pub correct: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MisclassifiedPair {
    pub true_class: usize,
    pub pred_class: usize,
    pub true_name: String,
    pub pred_name: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub top_pairs: Vec<MisclassifiedPair>,
    pub num_wrong: u64,
    pub total: u64,
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            report: &'a EvalReport,
            class_names: &'a [String],
            confusion: &'a [Vec<u64>],
        }
        let doc = Doc {
            report: self,
            class_names: &self.confusion.class_names,
            confusion: &self.confusion.counts,
        };
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }
}

/// Predicted class for every sample, in the order of `indices`.
fn predict_labels(model: &impl Classifier, data: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    let k = data.num_classes();
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &data.samples[i].image).collect();
            let probs = model.predict_probs(&stack(&images)?)?;
            if probs.dims() != [chunk.len(), k] {
                return Err(Error::Shape(format!(
                    "classifier returned {} for {} samples of {k} classes",
                    probs.shape(),
                    chunk.len()
                )));
            }
            probs.argmax_last_axis()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Confusion matrix of `model` over `data`, visiting samples in `data` order.
pub fn confusion(model: &impl Classifier, data: &Dataset) -> Result<ConfusionMatrix> {
    confusion_in_order(model, data, &(0..data.len()).collect::<Vec<_>>())
}

fn confusion_in_order(model: &impl Classifier, data: &Dataset, order: &[usize]) -> Result<ConfusionMatrix> {
    if data.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let predicted = predict_labels(model, data, order)?;
    let mut cm = ConfusionMatrix::new(data.class_names.clone());
    for (&i, &p) in order.iter().zip(&predicted) {
        cm.counts[data.samples[i].label][p] += 1;
    }
    Ok(cm)
}

pub fn per_class_from_confusion(cm: &ConfusionMatrix) -> Result<Vec<ClassAccuracy>> {
    (0..cm.counts.len())
        .map(|k| {
            let n = cm.row_sum(k);
            if n == 0 {
                return Err(Error::Dataset(format!("class '{}' has no test samples", cm.class_names[k])));
            }
            let correct = cm.counts[k][k];
            Ok(ClassAccuracy {
                class: cm.class_names[k].clone(),
                n,
                correct,
                accuracy: correct as f64 / n as f64,
            })
        })
        .collect()
}

pub fn per_class_accuracy(model: &impl Classifier, data: &Dataset) -> Result<Vec<ClassAccuracy>> {
    per_class_from_confusion(&confusion(model, data)?)
}

/// Off-diagonal cells by descending count, ties in row-major order.
pub fn top_misclassified_pairs(cm: &ConfusionMatrix, k: usize) -> Vec<MisclassifiedPair> {
    let mut cells = Vec::new();
    for (t, row) in cm.counts.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            if t != p && count > 0 {
                cells.push((t, p, count));
            }
        }
    }
    // Stable sort keeps row-major order among equal counts.
    cells.sort_by(|a, b| b.2.cmp(&a.2));
    cells
        .into_iter()
        .take(k)
        .map(|(t, p, count)| MisclassifiedPair {
            true_class: t,
            pred_class: p,
            true_name: cm.class_names[t].clone(),
            pred_name: cm.class_names[p].clone(),
            count,
        })
        .collect()
}

pub fn report_from_confusion(cm: ConfusionMatrix, top_k: usize) -> Result<EvalReport> {
    let per_class = per_class_from_confusion(&cm)?;
    let total = cm.total();
    let trace = cm.trace();
    Ok(EvalReport {
        overall_accuracy: trace as f64 / total as f64,
        per_class,
        top_pairs: top_misclassified_pairs(&cm, top_k),
        num_wrong: total - trace,
        total,
        confusion: cm,
    })
}

/// Evaluates on a seeded shuffle of the whole test set. Every metric is a
/// function of the sample multiset, so the seed only changes the visiting order.
pub fn evaluate(model: &impl Classifier, data: &Dataset, shuffle_seed: u64, top_k: usize) -> Result<EvalReport> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(shuffle_seed).shuffle(&mut order);
    report_from_confusion(confusion_in_order(model, data, &order)?, top_k)
}

pub fn save_report(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))
}

pub fn save_confusion_csv(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    cm.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    /// Predicts from the first pixel: class = value, or a constant.
    struct Oracle(Option<usize>, usize);

    impl Classifier for Oracle {
        fn predict_probs(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
            let n = batch.dims()[0];
            let stride = batch.len() / n;
            let k = self.1;
            Tensor::from_fn([n, k], |i| {
                let (row, col) = (i / k, i % k);
                let class = self.0.unwrap_or(batch.data()[row * stride] as usize);
                if col == class { 1.0 } else { 0.0 }
            })
        }
    }

    fn labelled(counts: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    image: Tensor::full([2, 2, 1], label as f32).unwrap(),
                    label,
                    source_path: format!("{label}/{i}").into(),
                });
            }
        }
        Dataset { class_names: (0..counts.len()).map(|k| format!("k{k}")).collect(), samples }
    }

    #[test]
    fn constant_model() {
        let d = labelled(&[5, 5, 5, 5]);
        let r = evaluate(&Oracle(Some(0), 4), &d, 1, 10).unwrap();
        assert_eq!(r.overall_accuracy, 0.25);
        let acc: Vec<f64> = r.per_class.iter().map(|c| c.accuracy).collect();
        assert_eq!(acc, vec![1.0, 0.0, 0.0, 0.0]);
        let cm = confusion(&Oracle(Some(0), 4), &d).unwrap();
        assert!(cm.counts.iter().all(|row| row[1..].iter().all(|&c| c == 0)));
        assert_eq!(r.num_wrong, 15);
    }

    #[test]
    fn perfect_model() {
        let d = labelled(&[3, 4]);
        let r = evaluate(&Oracle(None, 2), &d, 0, 5).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert_eq!(r.num_wrong, 0);
        assert!(r.top_pairs.is_empty());
        assert_eq!(r.confusion.counts, vec![vec![3, 0], vec![0, 4]]);
        assert_eq!(r, evaluate(&Oracle(None, 2), &d, 99, 5).unwrap());
    }

    #[test]
    fn weighted_per_class_mean() {
        let mut cm = ConfusionMatrix::new(vec!["a".into(), "b".into()]);
        cm.counts = vec![vec![5, 5], vec![0, 30]];
        let r = report_from_confusion(cm, 3).unwrap();
        assert_eq!(r.overall_accuracy, 0.875);
        assert_eq!(r.per_class[0].accuracy, 0.5);
        assert_eq!(r.per_class[1].accuracy, 1.0);
    }

    #[test]
    fn pair_ranking() {
        let mut cm = ConfusionMatrix::new((0..7).map(|k| k.to_string()).collect());
        cm.counts[2][3] = 88;
        cm.counts[5][6] = 61;
        let pairs: Vec<(usize, usize, u64)> = top_misclassified_pairs(&cm, 10)
            .iter()
            .map(|p| (p.true_class, p.pred_class, p.count))
            .collect();
        assert_eq!(pairs, vec![(2, 3, 88), (5, 6, 61)]);

        let mut tie = ConfusionMatrix::new(vec!["a".into(), "b".into()]);
        tie.counts = vec![vec![0, 4], vec![4, 0]];
        let top = top_misclassified_pairs(&tie, 1);
        assert_eq!((top[0].true_class, top[0].pred_class), (0, 1));
        assert!(top_misclassified_pairs(&ConfusionMatrix::new(vec!["a".into()]), 3).is_empty());
    }

    #[test]
    fn empty_class_is_an_error() {
        let d = labelled(&[3, 0]);
        assert!(per_class_accuracy(&Oracle(None, 2), &d).is_err());
    }

    #[test]
    fn outputs() {
        let mut cm = ConfusionMatrix::new(vec!["ح".into(), "a,b".into()]);
        cm.counts = vec![vec![1, 2], vec![0, 3]];
        let mut buf = Vec::new();
        cm.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "true\\pred,ح,\"a,b\"\nح,1,2\n\"a,b\",0,3\n");
        let json: serde_json::Value = serde_json::from_str(&report_from_confusion(cm, 2).unwrap().to_json()).unwrap();
        for key in ["overall_accuracy", "per_class", "top_pairs", "num_wrong", "confusion"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["num_wrong"], 2);
        assert_eq!(json["per_class"][0]["class"], "ح");
    }
}
