//! Grid search over flood levels with validation-based selection.
//!
//! Every (trial, b) pair is an independent training run whose seed is a hash
//! of the master seed and its coordinates. Results are collected in
//! (b index, trial) order no matter which worker finished first.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate, load_idx, split_train_val, LabeledDataset, SplitDataset, SyntheticSpec};
use crate::error::{FloodError, Result};
use crate::experiments::stats::{mean, welch_t_test, MeanStd, WelchResult};
use crate::io::{csv_error, csv_writer, fmt_opt, fmt_real};
use crate::objectives::check_flood_level;
use crate::seeds;
use crate::trainer::{train, TrainConfig, TrainingLog};

/// Significance level of the reported t-tests.
pub const ALPHA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Fresh splits per trial; the spec's own seed is replaced by the trial's
    /// data seed.
    Synthetic { spec: SyntheticSpec },
    /// A fixed IDX train/test pair. Each trial draws its own train/validation
    /// partition of the training file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Share of the training file used for training; the rest validates.
        train_proportion: f64,
    },
}

impl DataSource {
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        DataSource::Synthetic { spec }
    }
}

enum Loaded {
    Synthetic(Vec<SplitDataset>),
    Idx {
        train: LabeledDataset,
        test: LabeledDataset,
        proportion: f64,
    },
}

impl Loaded {
    fn load(source: &DataSource, master_seed: u64, n_trials: usize) -> Result<Loaded> {
        match source {
            DataSource::Synthetic { spec } => (0..n_trials)
                .map(|t| generate(&spec.with_seed(seeds::data_seed(master_seed, t))))
                .collect::<Result<Vec<_>>>()
                .map(Loaded::Synthetic),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_proportion,
            } => Ok(Loaded::Idx {
                train: load_idx(train_images, train_labels)?,
                test: load_idx(test_images, test_labels)?,
                proportion: *train_proportion,
            }),
        }
    }

    fn trial(&self, master_seed: u64, trial: usize) -> Result<std::borrow::Cow<'_, SplitDataset>> {
        use std::borrow::Cow;
        match self {
            Loaded::Synthetic(splits) => Ok(Cow::Borrowed(&splits[trial])),
            Loaded::Idx { train, test, proportion } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::data_seed(master_seed, trial));
                let (tr, va) = split_train_val(train, *proportion, &mut rng)?;
                Ok(Cow::Owned(SplitDataset::new(tr, va, test.clone())?))
            }
        }
    }
}

/// Splits of one trial, exactly as a sweep would build them.
pub fn load_trial(source: &DataSource, master_seed: u64, trial: usize) -> Result<SplitDataset> {
    match source {
        DataSource::Synthetic { spec } => generate(&spec.with_seed(seeds::data_seed(master_seed, trial))),
        DataSource::Idx { .. } => Ok(Loaded::load(source, master_seed, 0)?.trial(master_seed, trial)?.into_owned()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Template for every run; its flood level and seed are overwritten.
    pub base: TrainConfig,
    pub data: DataSource,
    /// Flood levels in increasing order.
    pub grid: Vec<f64>,
    pub n_trials: usize,
    pub workers: usize,
    pub master_seed: u64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(FloodError::InvalidSpec("flood grid is empty".into()));
        }
        for &b in &self.grid {
            check_flood_level(b)?;
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FloodError::InvalidSpec("flood grid must be strictly increasing".into()));
        }
        if self.n_trials == 0 {
            return Err(FloodError::InvalidSpec("n_trials must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(FloodError::InvalidSpec("workers must be >= 1".into()));
        }
        Ok(())
    }

    /// Training configuration of run (trial, b index).
    pub fn run_config(&self, trial: usize, b_index: usize) -> TrainConfig {
        self.base
            .clone()
            .with_flood_level(self.grid[b_index])
            .with_seed(seeds::run_seed(self.master_seed, trial, b_index))
    }
}

/// `start, start + step, ...` up to `stop` inclusive. Values are computed as
/// `start + i * step` and rounded to 12 decimals to avoid drift.
pub fn flood_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || start < 0.0 || stop < start {
        return Err(FloodError::InvalidSpec(format!(
            "bad grid {start}:{stop}:{step}; need 0 <= start <= stop"
        )));
    }
    if step <= 0.0 {
        return if start == stop {
            Ok(vec![start])
        } else {
            Err(FloodError::InvalidSpec(format!("grid step must be positive, got {step}")))
        };
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub b: f64,
    pub b_index: usize,
    pub trial: usize,
    pub seed: u64,
    pub final_val_accuracy: f64,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub final_train_loss: f64,
    pub final_train_error: f64,
    pub early_stop_epoch: usize,
    /// Best validation accuracy over all epochs.
    pub early_stop_val_accuracy: f64,
    pub early_stop_test_accuracy: f64,
    pub early_stop_test_loss: f64,
    pub early_stop_train_error: f64,
    pub first_submersion_epoch: Option<usize>,
    /// Largest `full - minibatch` Jensen difference over all epochs, when
    /// the check was enabled.
    pub jensen_max_excess: Option<f64>,
}

impl RunOutcome {
    pub fn from_log(log: &TrainingLog, b_index: usize, trial: usize) -> Self {
        let fin = log.final_metrics();
        let es = log.early_stop_metrics();
        let jensen_max_excess = log
            .epochs
            .iter()
            .filter_map(|m| m.jensen_full.zip(m.jensen_minibatch))
            .map(|(f, mb)| f - mb)
            .reduce(f64::max);
        RunOutcome {
            b: log.config.flood_level,
            b_index,
            trial,
            seed: log.config.seed,
            final_val_accuracy: fin.val_accuracy,
            final_test_accuracy: log.final_test.accuracy(),
            final_test_loss: log.final_test.loss,
            final_train_loss: fin.train_loss,
            final_train_error: fin.train_error,
            early_stop_epoch: log.early_stop_epoch,
            early_stop_val_accuracy: es.val_accuracy,
            early_stop_test_accuracy: log.early_stop_test.accuracy(),
            early_stop_test_loss: log.early_stop_test.loss,
            early_stop_train_error: es.train_error,
            first_submersion_epoch: log.first_submersion.as_ref().map(|s| s.epoch),
            jensen_max_excess,
        }
    }
}

/// Flood levels picked for one trial by validation accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSelection {
    pub trial: usize,
    /// Chosen by final-epoch validation accuracy.
    pub final_b_index: usize,
    pub final_b: f64,
    /// Chosen by the best validation accuracy over epochs.
    pub early_stop_b_index: usize,
    pub early_stop_b: f64,
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Aggregates for one reporting variant (final epoch or early stopping).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    /// Test accuracy at `b = 0`, when the grid contains it.
    pub without_flooding: Option<MeanStd>,
    /// Test accuracy at the selected `b`.
    pub with_flooding: MeanStd,
    pub chosen_b: MeanStd,
    /// Mean test loss at the selected `b`.
    pub selected_test_loss: f64,
    /// Mean test loss at `b = 0`.
    pub baseline_test_loss: Option<f64>,
    /// Best method against the other; absent without a baseline or with a
    /// single trial.
    pub t_test: Option<WelchResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub final_epoch: VariantSummary,
    pub early_stopping: VariantSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub grid: Vec<f64>,
    /// Ordered by b index, then trial.
    pub runs: Vec<RunOutcome>,
    pub selections: Vec<TrialSelection>,
    pub summary: SweepSummary,
}

impl SweepResult {
    pub fn run(&self, b_index: usize, trial: usize) -> &RunOutcome {
        &self.runs[b_index * self.config.n_trials + trial]
    }

    /// Test accuracies of a variant; `with_flooding` picks the selected `b`,
    /// otherwise `b = 0`.
    pub fn accuracies(&self, early_stop: bool, with_flooding: bool) -> Option<Vec<f64>> {
        let zero = self.grid.iter().position(|&b| b == 0.0);
        self.selections
            .iter()
            .map(|s| {
                let bi = match (with_flooding, early_stop) {
                    (true, false) => Some(s.final_b_index),
                    (true, true) => Some(s.early_stop_b_index),
                    (false, _) => zero,
                }?;
                let r = self.run(bi, s.trial);
                Some(if early_stop {
                    r.early_stop_test_accuracy
                } else {
                    r.final_test_accuracy
                })
            })
            .collect()
    }

    /// Two sub-tables of mean (std) test accuracy in percent and the chosen
    /// flood level.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        for (title, v) in [
            ("A. final epoch", &self.summary.final_epoch),
            ("B. early stopping", &self.summary.early_stopping),
        ] {
            let _ = writeln!(s, "{title}");
            let _ = writeln!(s, "  {:<20} {:<20} {:<16}", "without flooding", "with flooding", "chosen b");
            let base = v
                .without_flooding
                .map(|m| pct(&m))
                .unwrap_or_else(|| "n/a".into());
            let mut flood = pct(&v.with_flooding);
            if let Some(t) = v.t_test.filter(|t| t.significant) {
                let winner = if t.t_statistic > 0.0 { "with" } else { "without" };
                flood.push_str(&format!(" [{winner} wins, p={:.3}]", t.p_value));
            }
            let _ = writeln!(
                s,
                "  {:<20} {:<20} {:.2} ({:.2})",
                base, flood, v.chosen_b.mean, v.chosen_b.std
            );
            let _ = writeln!(
                s,
                "  test loss: selected b {:.4}, b = 0 {}",
                v.selected_test_loss,
                v.baseline_test_loss.map_or("n/a".into(), |l| format!("{l:.4}"))
            );
        }
        s
    }

    /// One row per (b, trial).
    pub fn write_runs_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record([
            "b",
            "trial",
            "seed",
            "final_val_accuracy",
            "final_test_accuracy",
            "final_test_loss",
            "final_train_loss",
            "final_train_error",
            "early_stop_epoch",
            "early_stop_val_accuracy",
            "early_stop_test_accuracy",
            "early_stop_test_loss",
            "early_stop_train_error",
            "first_submersion_epoch",
            "selected_final",
            "selected_early_stop",
        ])
        .map_err(|e| csv_error(path, e))?;
        for r in &self.runs {
            let sel = &self.selections[r.trial];
            w.write_record([
                fmt_real(r.b),
                r.trial.to_string(),
                r.seed.to_string(),
                fmt_real(r.final_val_accuracy),
                fmt_real(r.final_test_accuracy),
                fmt_real(r.final_test_loss),
                fmt_real(r.final_train_loss),
                fmt_real(r.final_train_error),
                r.early_stop_epoch.to_string(),
                fmt_real(r.early_stop_val_accuracy),
                fmt_real(r.early_stop_test_accuracy),
                fmt_real(r.early_stop_test_loss),
                fmt_real(r.early_stop_train_error),
                r.first_submersion_epoch.map_or(String::new(), |e| e.to_string()),
                (sel.final_b_index == r.b_index).to_string(),
                (sel.early_stop_b_index == r.b_index).to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| FloodError::Io {
            path: path.into(),
            source: e,
        })
    }

    /// One row per trial with the selected flood levels.
    pub fn write_selections_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record([
            "trial",
            "final_b",
            "final_test_accuracy",
            "early_stop_b",
            "early_stop_test_accuracy",
            "baseline_final_test_accuracy",
            "baseline_early_stop_test_accuracy",
        ])
        .map_err(|e| csv_error(path, e))?;
        let zero = self.grid.iter().position(|&b| b == 0.0);
        for s in &self.selections {
            let base = zero.map(|z| self.run(z, s.trial));
            w.write_record([
                s.trial.to_string(),
                fmt_real(s.final_b),
                fmt_real(self.run(s.final_b_index, s.trial).final_test_accuracy),
                fmt_real(s.early_stop_b),
                fmt_real(self.run(s.early_stop_b_index, s.trial).early_stop_test_accuracy),
                fmt_opt(base.map(|r| r.final_test_accuracy)),
                fmt_opt(base.map(|r| r.early_stop_test_accuracy)),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| FloodError::Io {
            path: path.into(),
            source: e,
        })
    }
}

fn pct(m: &MeanStd) -> String {
    format!("{:.2}% ({:.2})", 100.0 * m.mean, 100.0 * m.std)
}

fn select(runs: &[RunOutcome], grid: &[f64], n_trials: usize) -> Vec<TrialSelection> {
    (0..n_trials)
        .map(|t| {
            let at = |bi: usize| &runs[bi * n_trials + t];
            let fin: Vec<f64> = (0..grid.len()).map(|bi| at(bi).final_val_accuracy).collect();
            let es: Vec<f64> = (0..grid.len()).map(|bi| at(bi).early_stop_val_accuracy).collect();
            let fi = argmax_first(&fin).expect("non-empty grid");
            let ei = argmax_first(&es).expect("non-empty grid");
            TrialSelection {
                trial: t,
                final_b_index: fi,
                final_b: grid[fi],
                early_stop_b_index: ei,
                early_stop_b: grid[ei],
            }
        })
        .collect()
}

fn summarize(runs: &[RunOutcome], grid: &[f64], selections: &[TrialSelection], early: bool) -> Result<VariantSummary> {
    let n_trials = selections.len();
    let at = |bi: usize, t: usize| &runs[bi * n_trials + t];
    let pick = |s: &TrialSelection| if early { s.early_stop_b_index } else { s.final_b_index };
    let acc = |r: &RunOutcome| if early { r.early_stop_test_accuracy } else { r.final_test_accuracy };
    let loss = |r: &RunOutcome| if early { r.early_stop_test_loss } else { r.final_test_loss };

    let flood_acc: Vec<f64> = selections.iter().map(|s| acc(at(pick(s), s.trial))).collect();
    let flood_loss: Vec<f64> = selections.iter().map(|s| loss(at(pick(s), s.trial))).collect();
    let chosen: Vec<f64> = selections.iter().map(|s| grid[pick(s)]).collect();
    let zero = grid.iter().position(|&b| b == 0.0);
    let base_acc: Option<Vec<f64>> = zero.map(|z| (0..n_trials).map(|t| acc(at(z, t))).collect());
    let base_loss = zero.map(|z| mean(&(0..n_trials).map(|t| loss(at(z, t))).collect::<Vec<_>>()));

    let t_test = match &base_acc {
        Some(base) if n_trials >= 2 => {
            // best-vs-other: the sample with the larger mean goes first
            let (a, b) = if mean(&flood_acc) >= mean(base) {
                (&flood_acc, base)
            } else {
                (base, &flood_acc)
            };
            let mut r = welch_t_test(a, b, ALPHA)?;
            if !std::ptr::eq(a, &flood_acc) {
                r.t_statistic = -r.t_statistic;
            }
            Some(r)
        }
        _ => None,
    };
    Ok(VariantSummary {
        without_flooding: base_acc.as_deref().map(MeanStd::of),
        with_flooding: MeanStd::of(&flood_acc),
        chosen_b: MeanStd::of(&chosen),
        selected_test_loss: mean(&flood_loss),
        baseline_test_loss: base_loss,
        t_test,
    })
}

/// Runs the whole grid for every trial on a pool of `config.workers` threads.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepResult> {
    run_sweep_with_progress(config, &|_| {})
}

/// [`run_sweep`] calling `progress` after each finished run (in completion
/// order).
pub fn run_sweep_with_progress(
    config: &SweepConfig,
    progress: &(dyn Fn(&RunOutcome) + Sync),
) -> Result<SweepResult> {
    config.validate()?;
    let loaded = Loaded::load(&config.data, config.master_seed, config.n_trials)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| FloodError::InvalidSpec(format!("cannot start worker pool: {e}")))?;
    let jobs: Vec<(usize, usize)> = (0..config.grid.len())
        .flat_map(|bi| (0..config.n_trials).map(move |t| (bi, t)))
        .collect();
    let results: Vec<Result<RunOutcome>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(bi, t)| {
                let data = loaded.trial(config.master_seed, t)?;
                let log = train(&config.run_config(t, bi), &data)?;
                let out = RunOutcome::from_log(&log, bi, t);
                progress(&out);
                Ok(out)
            })
            .collect()
    });
    let mut runs = Vec::with_capacity(results.len());
    for (r, &(bi, t)) in results.into_iter().zip(&jobs) {
        runs.push(r.map_err(|e| FloodError::RunFailed {
            b: config.grid[bi],
            trial: t,
            source: Box::new(e),
        })?);
    }
    let selections = select(&runs, &config.grid, config.n_trials);
    let summary = SweepSummary {
        final_epoch: summarize(&runs, &config.grid, &selections, false)?,
        early_stopping: summarize(&runs, &config.grid, &selections, true)?,
    };
    Ok(SweepResult {
        config: config.clone(),
        grid: config.grid.clone(),
        runs,
        selections,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitSizes;
    use crate::optim::OptimizerConfig;
    use crate::trainer::MetricFlags;
    use crate::objectives::LossKind;

    #[test]
    fn grid_examples() {
        let g = flood_grid(0.0, 0.5, 0.01).unwrap();
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[50], 0.5);
        assert_eq!(g[7], 0.07);
        let g = flood_grid(0.0, 0.1, 0.01).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[10], 0.1);
        assert_eq!(flood_grid(0.0, 0.5, 0.05).unwrap().len(), 11);
        assert_eq!(flood_grid(0.0, 0.0, 0.0).unwrap(), vec![0.0]);
        assert!(flood_grid(0.3, 0.1, 0.01).is_err());
        assert!(flood_grid(-0.1, 0.1, 0.01).is_err());
        assert!(flood_grid(0.0, 0.1, 0.0).is_err());
    }

    #[test]
    fn argmax_ties_go_first() {
        assert_eq!(argmax_first(&[0.5, 0.7, 0.7, 0.6]), Some(1));
        assert_eq!(argmax_first(&[0.5]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    fn tiny(grid: Vec<f64>, n_trials: usize, workers: usize) -> SweepConfig {
        let mut spec = SyntheticSpec::two_gaussians(0);
        spec.sizes = SplitSizes {
            train: 30,
            validation: 20,
            test: 50,
        };
        spec.noise_rate = 0.1;
        SweepConfig {
            base: TrainConfig {
                layer_sizes: vec![10, 8, 1],
                loss: LossKind::Logistic,
                optimizer: OptimizerConfig::adam(0.01),
                flood_level: 0.0,
                epochs: 5,
                batch_size: 10,
                seed: 0,
                metrics: MetricFlags::default(),
            },
            data: DataSource::synthetic(spec),
            grid,
            n_trials,
            workers,
            master_seed: 11,
        }
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let a = run_sweep(&tiny(vec![0.0, 0.2, 0.4], 3, 1)).unwrap();
        let mut c = tiny(vec![0.0, 0.2, 0.4], 3, 3);
        let b = run_sweep(&c).unwrap();
        assert_eq!(a.runs, b.runs);
        assert_eq!(a.selections, b.selections);
        c.workers = 2;
        assert_eq!(run_sweep(&c).unwrap().summary, a.summary);
        for (i, r) in a.runs.iter().enumerate() {
            assert_eq!((r.b_index, r.trial), (i / 3, i % 3));
        }
    }

    #[test]
    fn selection_maximizes_validation_accuracy() {
        let res = run_sweep(&tiny(vec![0.0, 0.1, 0.3, 0.6], 2, 1)).unwrap();
        for s in &res.selections {
            let fin: Vec<f64> = (0..4).map(|bi| res.run(bi, s.trial).final_val_accuracy).collect();
            let best = fin.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(fin[s.final_b_index], best);
            assert!(fin[..s.final_b_index].iter().all(|&v| v < best));
            let es: Vec<f64> = (0..4).map(|bi| res.run(bi, s.trial).early_stop_val_accuracy).collect();
            let best = es.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(es[s.early_stop_b_index], best);
            assert!(es[..s.early_stop_b_index].iter().all(|&v| v < best));
        }
    }

    #[test]
    fn degenerate_single_run() {
        let res = run_sweep(&tiny(vec![0.0], 1, 1)).unwrap();
        assert_eq!(res.runs.len(), 1);
        let f = &res.summary.final_epoch;
        assert_eq!(f.chosen_b.mean, 0.0);
        assert_eq!(f.without_flooding.unwrap().mean, f.with_flooding.mean);
        assert!(f.t_test.is_none());
        assert!(res.summary_table().contains("A. final epoch"));
    }

    #[test]
    fn config_errors() {
        assert!(run_sweep(&tiny(vec![], 1, 1)).is_err());
        assert!(run_sweep(&tiny(vec![0.2, 0.1], 1, 1)).is_err());
        assert!(run_sweep(&tiny(vec![0.0], 0, 1)).is_err());
        let mut c = tiny(vec![0.0, 0.1], 1, 1);
        c.base.optimizer = OptimizerConfig::sgd(1e300, 0.0);
        match run_sweep(&c) {
            Err(FloodError::RunFailed { b, trial, .. }) => assert_eq!((b, trial), (0.0, 0)),
            other => panic!("expected a failed run, got {other:?}"),
        }
    }
}
