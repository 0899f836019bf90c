//! Mini-batched training with flooding.
//!
//! For every mini-batch the mean surrogate loss `L` is compared with the flood
//! level `b` before the update. At or above `b` the optimizer receives the
//! ordinary gradient; below `b` it receives the negated gradient, which is the
//! gradient of `|L - b| + b` away from the kink.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SplitDataset};
use crate::error::{FloodError, Result};
use crate::experiments::diagnostics::filter_normalized_grad_norm;
use crate::io::{csv_error, csv_writer, fmt_opt, fmt_real};
use crate::nn::{backward, forward, init_mlp, Gradients, ModelParams, EVAL_CHUNK};
use crate::objectives::{
    check_flood_level, check_model_fits, evaluate, flooded, mean_loss_and_grad, Direction, Evaluation,
    LossKind,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::seeds;

/// Optional per-epoch measurements. All off by default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricFlags {
    /// Filter-normalized gradient norms of the train and test losses.
    pub grad_norms: bool,
    /// Evaluate the test split after every epoch, not only at the end.
    pub test_every_epoch: bool,
    /// Record both sides of the mini-batch Jensen bound each epoch.
    pub jensen_check: bool,
    /// Keep a parameter snapshot for every epoch.
    pub keep_all_checkpoints: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `[input, hidden..., output]`.
    pub layer_sizes: Vec<usize>,
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub flood_level: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub metrics: MetricFlags,
}

impl TrainConfig {
    /// Five hidden layers of 500 ReLU units, logistic loss, Adam at 1e-3,
    /// batches of 100 for 500 epochs.
    pub fn synthetic(input_dim: usize) -> Self {
        TrainConfig {
            layer_sizes: vec![input_dim, 500, 500, 500, 500, 500, 1],
            loss: LossKind::Logistic,
            optimizer: OptimizerConfig::adam(0.001),
            flood_level: 0.0,
            epochs: 500,
            batch_size: 100,
            seed: 0,
            metrics: MetricFlags::default(),
        }
    }

    /// Two hidden layers of 1000 units with softmax cross-entropy and SGD
    /// (lr 0.1, momentum 0.9) for 500 epochs.
    pub fn mnist_mlp() -> Self {
        TrainConfig {
            layer_sizes: vec![784, 1000, 1000, 10],
            loss: LossKind::SoftmaxCrossEntropy,
            optimizer: OptimizerConfig::sgd(0.1, 0.9),
            flood_level: 0.0,
            epochs: 500,
            batch_size: 100,
            seed: 0,
            metrics: MetricFlags::default(),
        }
    }

    pub fn with_flood_level(mut self, b: f64) -> Self {
        self.flood_level = b;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        check_flood_level(self.flood_level)?;
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(FloodError::InvalidSpec("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > n_train {
            return Err(FloodError::InvalidSpec(format!(
                "batch size {} must lie in 1..={n_train}",
                self.batch_size
            )));
        }
        if !self.loss.is_surrogate() {
            return Err(FloodError::InvalidSpec(
                "training needs a differentiable surrogate loss".into(),
            ));
        }
        Ok(())
    }
}

/// Metrics recorded after one epoch. Epochs are numbered from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Raw (unflooded) empirical risk on the full training split.
    pub train_loss: f64,
    pub train_error: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub learning_rate: f64,
    pub grad_norm_train: Option<f64>,
    pub grad_norm_test: Option<f64>,
    /// Flooded risk of the whole training split.
    pub jensen_full: Option<f64>,
    /// Size-weighted mean of the flooded mini-batch risks of this epoch.
    pub jensen_minibatch: Option<f64>,
    /// Mini-batches of this epoch that took an ascent step.
    pub ascent_steps: usize,
}

/// Parameters captured at a specific point of training.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    /// Zero-based mini-batch index within the epoch.
    pub batch: usize,
    pub params: ModelParams,
}

#[derive(Clone, Debug)]
pub struct TrainingLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    pub final_params: ModelParams,
    pub early_stop_epoch: usize,
    /// Parameters at the end of `early_stop_epoch`.
    pub best_params: ModelParams,
    /// Parameters right before the first mini-batch whose loss fell below
    /// the flood level was used for an (ascent) update.
    pub first_submersion: Option<Snapshot>,
    pub final_test: Evaluation,
    pub early_stop_test: Evaluation,
    /// One entry per epoch when `keep_all_checkpoints` is set.
    pub checkpoints: Vec<ModelParams>,
}

/// Everything an observer can see about a single update.
pub struct StepRecord<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub indices: &'a [usize],
    pub params_before: &'a ModelParams,
    pub batch_loss: f64,
    pub direction: Direction,
    /// Gradient of the raw mean mini-batch loss.
    pub raw_grad: &'a Gradients,
    /// Gradient handed to the optimizer.
    pub applied_grad: &'a Gradients,
}

/// Instrumentation hook called once per optimizer step.
pub trait StepObserver {
    fn on_step(&mut self, record: &StepRecord<'_>);
}

impl StepObserver for () {
    fn on_step(&mut self, _: &StepRecord<'_>) {}
}

/// Shuffles `0..n` and cuts it into consecutive chunks of `batch_size`; the
/// last chunk may be smaller.
pub fn make_minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(FloodError::InvalidSpec(format!(
            "batch size {batch_size} must lie in 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn batch_rows(data: &LabeledDataset, idx: &[usize]) -> (Array2<f64>, Vec<i32>) {
    let x = data.features().select(Axis(0), idx);
    let y = idx.iter().map(|&i| data.labels()[i]).collect();
    (x, y)
}

/// Gradient of the mean loss over the whole dataset, accumulated in chunks.
pub fn risk_gradient(params: &ModelParams, data: &LabeledDataset, loss: LossKind) -> Result<Gradients> {
    check_model_fits(params, data, loss)?;
    let n = data.len() as f64;
    let mut total = Gradients::zeros_like(params);
    for (x, y) in data
        .features()
        .axis_chunks_iter(Axis(0), EVAL_CHUNK)
        .zip(data.labels().chunks(EVAL_CHUNK))
    {
        let trace = forward(params, x)?;
        let (_, mut cot) = mean_loss_and_grad(trace.scores.view(), y, loss)?;
        cot *= y.len() as f64 / n;
        let g = backward(params, &trace, cot.view())?;
        for (acc, part) in total.layers_mut().iter_mut().zip(g.layers()) {
            acc.weights += &part.weights;
            acc.bias += &part.bias;
        }
    }
    Ok(total)
}

/// Both sides of the mini-batch Jensen bound:
/// `|R - b| + b <= sum_m (n_m / n) (|R_m - b| + b)`.
///
/// With equal batch sizes the right side is the plain mean over batches.
pub fn jensen_gap(
    params: &ModelParams,
    data: &LabeledDataset,
    loss: LossKind,
    b: f64,
    batches: &[Vec<usize>],
) -> Result<(f64, f64)> {
    check_flood_level(b)?;
    let n = data.len();
    let mut seen = vec![false; n];
    for &i in batches.iter().flatten() {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(FloodError::InvalidSpec("mini-batches must partition the data".into()));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(FloodError::InvalidSpec("mini-batches must cover the data".into()));
    }
    let full = flooded(crate::objectives::empirical_risk(params, data, loss)?, b)?.flooded_risk;
    let mut mean = 0.0;
    for batch in batches {
        let r = crate::objectives::empirical_risk(params, &data.subset(batch), loss)?;
        mean += flooded(r, b)?.flooded_risk * batch.len() as f64 / n as f64;
    }
    Ok((full, mean))
}

/// Epoch (1-based) with the highest validation accuracy; ties go to the
/// earliest epoch. Returns `None` for an empty slice.
pub fn best_validation_epoch(val_accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &acc) in val_accuracies.iter().enumerate() {
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((i + 1, acc));
        }
    }
    best.map(|(e, _)| e)
}

/// The early-stopping choice recorded in `log`.
pub fn early_stop_select(log: &TrainingLog) -> (usize, ModelParams) {
    (log.early_stop_epoch, log.best_params.clone())
}

pub fn train(config: &TrainConfig, data: &SplitDataset) -> Result<TrainingLog> {
    train_observed(config, data, &mut ())
}

/// [`train`] with a per-step observer.
pub fn train_observed(
    config: &TrainConfig,
    data: &SplitDataset,
    observer: &mut dyn StepObserver,
) -> Result<TrainingLog> {
    let train_set = &data.train;
    config.validate(train_set.len())?;
    let mut params = init_mlp(&config.layer_sizes, seeds::derive(config.seed, &[1]))?;
    for split in [&data.train, &data.validation, &data.test] {
        check_model_fits(&params, split, config.loss)?;
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, &[2]));
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &params)?;
    let b = config.flood_level;
    let flags = &config.metrics;

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    let mut first_submersion: Option<Snapshot> = None;
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let lr = config.optimizer.lr_at_epoch(epoch - 1);
        let batches = make_minibatches(train_set.len(), config.batch_size, &mut shuffle_rng)?;
        let mut ascent_steps = 0;
        for (bi, idx) in batches.iter().enumerate() {
            let (x, y) = batch_rows(train_set, idx);
            let trace = forward(&params, x.view())?;
            let (batch_loss, cot) = mean_loss_and_grad(trace.scores.view(), &y, config.loss)?;
            if !batch_loss.is_finite() {
                return Err(FloodError::Numeric(format!(
                    "non-finite mini-batch loss at epoch {epoch}, batch {bi}"
                )));
            }
            let direction = flooded(batch_loss, b)?.direction;
            if direction == Direction::Ascent {
                ascent_steps += 1;
                if first_submersion.is_none() {
                    first_submersion = Some(Snapshot {
                        epoch,
                        batch: bi,
                        params: params.clone(),
                    });
                }
            }
            let raw = backward(&params, &trace, cot.view())?;
            let applied = match direction {
                Direction::Descent => raw.clone(),
                Direction::Ascent => {
                    let mut g = raw.clone();
                    g.scale(-1.0);
                    g
                }
            };
            observer.on_step(&StepRecord {
                epoch,
                batch: bi,
                indices: idx,
                params_before: &params,
                batch_loss,
                direction,
                raw_grad: &raw,
                applied_grad: &applied,
            });
            optimizer.step(&mut params, &applied, lr).map_err(|e| match e {
                FloodError::Numeric(msg) => {
                    FloodError::Numeric(format!("{msg} at epoch {epoch}, batch {bi}"))
                }
                other => other,
            })?;
        }

        let tr = evaluate(&params, train_set, config.loss)?;
        let va = evaluate(&params, &data.validation, config.loss)?;
        if !tr.loss.is_finite() || !va.loss.is_finite() {
            return Err(FloodError::Numeric(format!("non-finite evaluation loss after epoch {epoch}")));
        }
        let te = if flags.test_every_epoch {
            Some(evaluate(&params, &data.test, config.loss)?)
        } else {
            None
        };
        let (grad_norm_train, grad_norm_test) = if flags.grad_norms {
            let gt = risk_gradient(&params, train_set, config.loss)?;
            let gs = risk_gradient(&params, &data.test, config.loss)?;
            (
                Some(filter_normalized_grad_norm(&params, &gt)?),
                Some(filter_normalized_grad_norm(&params, &gs)?),
            )
        } else {
            (None, None)
        };
        let (jensen_full, jensen_minibatch) = if flags.jensen_check {
            let (f, m) = jensen_gap(&params, train_set, config.loss, b, &batches)?;
            (Some(f), Some(m))
        } else {
            (None, None)
        };

        if best.as_ref().is_none_or(|(_, acc, _)| va.accuracy() > *acc) {
            best = Some((epoch, va.accuracy(), params.clone()));
        }
        if flags.keep_all_checkpoints {
            checkpoints.push(params.clone());
        }
        epochs.push(EpochMetrics {
            epoch,
            train_loss: tr.loss,
            train_error: tr.error,
            val_loss: va.loss,
            val_accuracy: va.accuracy(),
            test_loss: te.map(|e| e.loss),
            test_accuracy: te.map(|e| e.accuracy()),
            learning_rate: lr,
            grad_norm_train,
            grad_norm_test,
            jensen_full,
            jensen_minibatch,
            ascent_steps,
        });
    }

    let (early_stop_epoch, _, best_params) = best.expect("at least one epoch");
    let final_test = match epochs.last().and_then(|m| m.test_loss.zip(m.test_accuracy)) {
        Some((loss, acc)) => Evaluation { loss, error: 1.0 - acc },
        None => evaluate(&params, &data.test, config.loss)?,
    };
    let early_stop_test = evaluate(&best_params, &data.test, config.loss)?;
    Ok(TrainingLog {
        config: config.clone(),
        epochs,
        final_params: params,
        early_stop_epoch,
        best_params,
        first_submersion,
        final_test,
        early_stop_test,
        checkpoints,
    })
}

/// JSON-friendly view of a [`TrainingLog`] without parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    pub final_epoch: usize,
    pub early_stop_epoch: usize,
    pub first_submersion_epoch: Option<usize>,
    pub final_test_loss: f64,
    pub final_test_accuracy: f64,
    pub early_stop_test_loss: f64,
    pub early_stop_test_accuracy: f64,
}

impl TrainingLog {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.epochs.last().expect("at least one epoch")
    }

    pub fn early_stop_metrics(&self) -> &EpochMetrics {
        &self.epochs[self.early_stop_epoch - 1]
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            config: self.config.clone(),
            epochs: self.epochs.clone(),
            final_epoch: self.epochs.len(),
            early_stop_epoch: self.early_stop_epoch,
            first_submersion_epoch: self.first_submersion.as_ref().map(|s| s.epoch),
            final_test_loss: self.final_test.loss,
            final_test_accuracy: self.final_test.accuracy(),
            early_stop_test_loss: self.early_stop_test.loss,
            early_stop_test_accuracy: self.early_stop_test.accuracy(),
        }
    }

    /// One row per epoch with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_epochs_csv(&self.epochs, path)
    }
}

pub const EPOCH_CSV_HEADER: [&str; 13] = [
    "epoch",
    "train_loss",
    "train_error",
    "val_loss",
    "val_accuracy",
    "test_loss",
    "test_accuracy",
    "learning_rate",
    "grad_norm_train",
    "grad_norm_test",
    "jensen_full",
    "jensen_minibatch",
    "ascent_steps",
];

pub fn write_epochs_csv(epochs: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(EPOCH_CSV_HEADER).map_err(|e| csv_error(path, e))?;
    for m in epochs {
        w.write_record([
            m.epoch.to_string(),
            fmt_real(m.train_loss),
            fmt_real(m.train_error),
            fmt_real(m.val_loss),
            fmt_real(m.val_accuracy),
            fmt_opt(m.test_loss),
            fmt_opt(m.test_accuracy),
            fmt_real(m.learning_rate),
            fmt_opt(m.grad_norm_train),
            fmt_opt(m.grad_norm_test),
            fmt_opt(m.jensen_full),
            fmt_opt(m.jensen_minibatch),
            m.ascent_steps.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| FloodError::Io {
        path: path.into(),
        source: e,
    })
}
