//! Mini-batch Adam training with early stopping on a stratified validation
//! split.

use drivestyle_tensor::{adam_step, AdamConfig, OptimizerState, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ForwardMode, Model};
use crate::seeds::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            max_epochs: 100,
            batch_size: 32,
            patience: 10,
            validation_fraction: 0.2,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "validation fraction {} outside (0, 0.5]",
                self.validation_fraction
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 for batch normalization".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
}

/// Stratified split: per class, a seeded shuffle and the first
/// `round(fraction · n_c)` indices (at most `n_c − 1`) go to validation.
fn stratified_split(
    labels: &[usize],
    n_classes: usize,
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeds::rng(seed, &[tag::SPLIT]);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_val =
            ((fraction * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Batches of `size` over `order`; a trailing batch of one row joins the
/// previous batch so batch normalization always sees two rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}

/// Mean cross-entropy and accuracy of posteriors against labels.
pub(crate) fn loss_and_accuracy(probs: &Tensor, labels: &[usize]) -> (f64, f64) {
    let k = probs.shape()[1];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &y) in probs.data().chunks_exact(k).zip(labels) {
        loss -= row[y].max(drivestyle_tensor::tape::PROB_CLAMP).ln();
        if argmax(row) == y {
            correct += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    (loss / n, correct as f64 / n)
}

/// Index of the largest entry; ties keep the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place on inputs `x` (first axis = samples) and class
/// indices `labels`; returns the per-epoch history. The weights of the
/// epoch with the lowest validation loss are restored at the end.
pub fn train(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if x.shape().first() != Some(&labels.len()) {
        return Err(Error::Dimension {
            what: "training labels",
            expected: x.shape().first().copied().unwrap_or(0),
            actual: labels.len(),
        });
    }
    let k = model.spec.n_classes;
    let mut present = vec![false; k];
    for &l in labels {
        if l >= k {
            return Err(Error::Data(format!("label {l} outside {k} classes")));
        }
        present[l] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::Config(
            "training data must contain at least two classes".into(),
        ));
    }
    let (train_idx, val_idx) = stratified_split(labels, k, config.validation_fraction, config.seed);
    if val_idx.is_empty() || train_idx.len() < 2 {
        return Err(Error::Config(format!(
            "{} samples are too few for a validation split",
            labels.len()
        )));
    }
    let x_val = x.select_rows(&val_idx);
    let y_val: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut optimizer = OptimizerState::new(&model.store, config.adam());
    let mut order_rng = seeds::rng(config.seed, &[tag::TRAIN]);
    let mut dropout_rng = seeds::rng(config.seed, &[tag::DROPOUT]);
    let mut tape = Tape::new();
    let mut history = History::default();
    let mut best = (f64::INFINITY, model.store.snapshot(), 0usize);
    let mut waited = 0;
    let mut order = train_idx.clone();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in batches(&order, config.batch_size) {
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            tape.reset();
            model.store.clear_grads();
            let xv = tape.constant(x.select_rows(batch));
            let f = model.forward(&mut tape, xv, ForwardMode::TRAIN, &mut dropout_rng)?;
            let loss = tape.cross_entropy(f.probs, &y)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Data(format!(
                    "training loss diverged at epoch {epoch}"
                )));
            }
            let probs = tape.value(f.probs);
            correct += probs
                .data()
                .chunks_exact(k)
                .zip(&y)
                .filter(|(row, &t)| argmax(row) == t)
                .count();
            loss_sum += value * batch.len() as f64;
            tape.backward(loss, &mut model.store)?;
            adam_step(&mut model.store, &mut optimizer)?;
            if let Some(stats) = f.stats {
                model.update_running_stats(&stats);
            }
        }
        let (val_loss, val_accuracy) = loss_and_accuracy(&model.predict_proba(&x_val)?, &y_val);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
            val_loss,
            val_accuracy,
        });
        if val_loss < best.0 {
            best = (val_loss, model.store.snapshot(), epoch);
            waited = 0;
        } else {
            waited += 1;
            if waited >= config.patience {
                break;
            }
        }
    }
    model.store.restore(&best.1);
    history.best_epoch = best.2;
    Ok(history)
}

pub fn write_history_csv<W: std::io::Write>(w: W, history: &History) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "epoch",
        "train_loss",
        "train_accuracy",
        "val_loss",
        "val_accuracy",
    ])?;
    for e in &history.epochs {
        out.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.train_loss),
            format!("{:.6}", e.train_accuracy),
            format!("{:.6}", e.val_loss),
            format!("{:.6}", e.val_accuracy),
        ])?;
    }
    out.flush()?;
    Ok(())
}
