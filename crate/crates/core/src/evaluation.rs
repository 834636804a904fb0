//! Confusion-matrix metrics and model evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ExampleSource;
use crate::labeling::ChangeLabel;
use crate::models::{predict, Model, ModelError};
use crate::nn::{ops, Tensor};

pub const EVAL_BATCH: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Counts indexed `[true][predicted]` in class order Spike, Stable, Dip.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn new(counts: [[u64; 3]; 3]) -> Self {
        Self { counts }
    }

    pub fn add(&mut self, truth: ChangeLabel, predicted: ChangeLabel) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|k| self.counts[k][k]).sum()
    }

    /// One-vs-rest (TP, FP, FN, TN) for class `k`.
    pub fn one_vs_rest(&self, k: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[k][k];
        let fp: u64 = (0..3).filter(|&r| r != k).map(|r| self.counts[r][k]).sum();
        let fn_: u64 = (0..3).filter(|&c| c != k).map(|c| self.counts[k][c]).sum();
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: ChangeLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest accuracy `(TP + TN) / total`.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean per-class recall.
    pub balanced_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy = trace / total; per-class one-vs-rest precision, recall and
/// F1 (0 when undefined); macro F1 is the mean of the per-class F1 scores.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    let per_class: Vec<ClassMetrics> = ChangeLabel::ALL
        .iter()
        .map(|&label| {
            let (tp, fp, fn_, tn) = cm.one_vs_rest(label.index());
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                label,
                precision,
                recall,
                f1,
                accuracy: ratio(tp + tn, total),
            }
        })
        .collect();
    let present: Vec<f64> = (0..3)
        .filter(|&k| cm.counts[k].iter().sum::<u64>() > 0)
        .map(|k| per_class[k].recall)
        .collect();
    Ok(Metrics {
        accuracy: ratio(cm.trace(), total),
        balanced_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / 3.0,
        per_class,
        confusion: *cm,
    })
}

/// Fills a batch tensor from `idx`.
pub fn make_batch(src: &dyn ExampleSource, idx: &[usize]) -> (Tensor, Option<Tensor>, Vec<usize>) {
    let (c, l, a) = (src.channels(), src.length(), src.aux_len());
    let b = idx.len();
    let mut x = vec![0.0; b * c * l];
    let mut aux = vec![0.0; b * a];
    let mut y = Vec::with_capacity(b);
    for (r, &k) in idx.iter().enumerate() {
        src.write(k, &mut x[r * c * l..(r + 1) * c * l], &mut aux[r * a..(r + 1) * a]);
        y.push(src.label(k).index());
    }
    let aux = (a > 0).then(|| Tensor::new(vec![b, a], aux));
    (Tensor::new(vec![b, c, l], x), aux, y)
}

/// Eval-mode predictions, confusion matrix and mean cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<ChangeLabel>,
    pub confusion: ConfusionMatrix,
    pub loss: f64,
}

pub fn run_model(model: &Model, src: &dyn ExampleSource) -> Result<Evaluation, EvalError> {
    if src.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let mut cm = ConfusionMatrix::default();
    let mut predictions = Vec::with_capacity(src.len());
    let mut loss_sum = 0.0;
    let all: Vec<usize> = (0..src.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let (x, aux, y) = make_batch(src, idx);
        let logits = model.logits(x, aux)?;
        let (loss, _) = ops::cross_entropy_forward(&logits, &y).map_err(ModelError::from)?;
        loss_sum += loss * idx.len() as f64;
        for (r, &t) in y.iter().enumerate() {
            let p = predict(logits.row(r));
            cm.add(ChangeLabel::from_index(t).unwrap(), p);
            predictions.push(p);
        }
    }
    Ok(Evaluation {
        predictions,
        confusion: cm,
        loss: loss_sum / src.len() as f64,
    })
}

/// Metrics of `model` over every example of `src`.
pub fn evaluate(model: &Model, src: &dyn ExampleSource) -> Result<Metrics, EvalError> {
    metrics(&run_model(model, src)?.confusion)
}
