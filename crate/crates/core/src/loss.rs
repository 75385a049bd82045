//! Sparse categorical cross-entropy and accuracy over probability rows.

use crate::error::{Error, Result};
use crate::tensor::{argmax, Real, Shape, Tensor};

/// Lower clamp applied to the true-class probability before the logarithm.
pub const PROB_EPSILON: f64 = 1e-7;

/// Tolerance on each probability row summing to one.
const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Mean over the batch.
    pub value: f64,
    pub batch_size: usize,
}

fn rows_and_classes<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = match *probs.dims() {
        [n, k] => (n, k),
        [k] => (1, k),
        _ => {
            return Err(Error::Shape(format!(
                "expected probabilities [N, K], got {}",
                probs.shape()
            )))
        }
    };
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} probability rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    Ok((n, k))
}

fn check_normalized<T: Real>(probs: &Tensor<T>, k: usize) -> Result<()> {
    for (row, chunk) in probs.data().chunks(k).enumerate() {
        let sum: f64 = chunk.iter().map(|p| p.as_f64()).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::NotNormalized { row, sum });
        }
    }
    Ok(())
}

/// `-(1/N) * sum_n ln(clamp(p[n, y_n], eps, 1))`
pub fn sparse_cce<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<LossValue> {
    let (n, k) = rows_and_classes(probs, labels)?;
    check_normalized(probs, k)?;
    let mut total = 0.0f64;
    for (row, &label) in probs.data().chunks(k).zip(labels) {
        let p = row[label].as_f64().clamp(PROB_EPSILON, 1.0);
        total -= p.ln();
    }
    let value = total / n as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(LossValue {
        value,
        batch_size: n,
    })
}

/// Gradient of the mean loss with respect to the pre-softmax logits:
/// `(p - onehot(y)) / N`.
pub fn sparse_cce_grad_logits<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, k) = rows_and_classes(probs, labels)?;
    check_normalized(probs, k)?;
    let inv_n = T::of(1.0 / n as f64);
    let mut grad: Vec<T> = probs.data().iter().map(|&p| p * inv_n).collect();
    for (row, &label) in grad.chunks_mut(k).zip(labels) {
        row[label] = row[label] - inv_n;
    }
    Ok(Tensor::from_parts(Shape::new(probs.dims().to_vec())?, grad))
}

/// Fraction of rows whose argmax (ties to the smaller index) equals the label.
pub fn accuracy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let (n, k) = rows_and_classes(probs, labels)?;
    let correct = probs
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / n as f64)
}
