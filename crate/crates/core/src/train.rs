//! Mini-batch Adam training with best-validation retention and early
//! stopping.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ExampleSource;
use crate::evaluation::{make_batch, run_model, EvalError};
use crate::models::{Mode, Model, ModelError};
use crate::nn::Adam;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::EmptyEvaluation => TrainError::EmptyDataset,
            EvalError::Model(m) => TrainError::Model(m),
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// The retained model was replaced after this epoch.
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy (lowest
    /// validation loss on ties), or the last epoch without validation data.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Training ended because another epoch would have overrun the time
    /// budget.
    pub out_of_time: bool,
}

/// Trains `model` with the epochs, batch size, patience and learning rate
/// of its spec. Shuffling and dropout draw from separate streams of `seed`.
pub fn train(
    mut model: Model,
    train_src: &dyn ExampleSource,
    val_src: Option<&dyn ExampleSource>,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    train_with(&mut model, train_src, val_src, seed, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &mut Model,
    train_src: &dyn ExampleSource,
    val_src: Option<&dyn ExampleSource>,
    seed: u64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    train_within(model, train_src, val_src, seed, None, on_epoch)
}

/// As [`train_with`], but no epoch starts once the previous epoch's duration
/// would carry training past `budget`. The first epoch always runs. A budget
/// makes the epoch count depend on machine speed.
pub fn train_within(
    model: &mut Model,
    train_src: &dyn ExampleSource,
    val_src: Option<&dyn ExampleSource>,
    seed: u64,
    budget: Option<Duration>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    if train_src.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let val_src = val_src.filter(|v| !v.is_empty());
    let spec = model.spec.clone();
    let adam = Adam::new(spec.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
    drop_rng.set_stream(2);

    let mut order: Vec<usize> = (0..train_src.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut out_of_time = false;
    let start = Instant::now();
    let mut last_epoch = Duration::ZERO;

    for epoch in 0..spec.epochs {
        if budget.is_some_and(|b| epoch > 0 && start.elapsed() + last_epoch > b) {
            out_of_time = true;
            break;
        }
        let epoch_start = Instant::now();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in order.chunks(spec.batch_size.max(1)).enumerate() {
            let (x, aux, y) = make_batch(train_src, idx);
            let mut f = model.forward(x, aux, Mode::Train(&mut drop_rng))?;
            let logits = f.tape.value(f.logits).clone();
            let loss_var = f.tape.cross_entropy(f.logits, &y).map_err(ModelError::from)?;
            let loss = f.tape.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, step });
            }
            loss_sum += loss * idx.len() as f64;
            correct += y
                .iter()
                .enumerate()
                .filter(|&(r, &t)| crate::models::predict(logits.row(r)).index() == t)
                .count();
            let mut grads = f.tape.backward(loss_var);
            model.params.zero_grad();
            model.params.accumulate(&f.bound, &mut grads);
            adam.step(&mut model.params);
        }
        let n = train_src.len() as f64;
        let mut rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss: None,
            val_accuracy: None,
            improved: false,
        };
        if let Some(v) = val_src {
            let ev = run_model(model, v)?;
            let acc = ev.confusion.trace() as f64 / ev.confusion.total() as f64;
            rec.val_loss = Some(ev.loss);
            rec.val_accuracy = Some(acc);
            let better = match &best {
                None => true,
                Some((ba, bl, _, _)) => acc > *ba || (acc == *ba && ev.loss < *bl),
            };
            if better {
                best = Some((acc, ev.loss, epoch, model.clone()));
                rec.improved = true;
                since_best = 0;
            } else {
                since_best += 1;
            }
        } else {
            rec.improved = true;
        }
        on_epoch(&rec);
        history.push(rec);
        last_epoch = epoch_start.elapsed();
        if val_src.is_some() && since_best >= spec.patience {
            stopped_early = epoch + 1 < spec.epochs;
            break;
        }
    }

    let (model, best_epoch) = match best {
        Some((_, _, e, m)) => (m, e),
        None => (model.clone(), history.len().saturating_sub(1)),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
        out_of_time,
    })
}
