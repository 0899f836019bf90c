//! Memorization curves, filter-normalized gradient norms and 1-D loss
//! landscapes.

use std::path::Path;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{FloodError, Result};
use crate::experiments::stats::mean;
use crate::experiments::sweep::SweepResult;
use crate::io::{csv_error, csv_writer, fmt_real};
use crate::nn::{DenseLayer, Gradients, ModelParams};
use crate::objectives::{empirical_risk, LossKind};
use crate::seeds;

/// Norm of each unit's incoming weights together with its bias.
fn unit_norms(layer: &DenseLayer) -> Vec<f64> {
    layer
        .weights
        .axis_iter(Axis(0))
        .zip(layer.bias.iter())
        .map(|(row, b)| (row.dot(&row) + b * b).sqrt())
        .collect()
}

/// Gradient norm after scaling each unit's gradient row (weights and bias)
/// by the norm of that unit's parameter row.
pub fn filter_normalized_grad_norm(params: &ModelParams, grads: &Gradients) -> Result<f64> {
    grads.check_congruent(params)?;
    let mut total = 0.0;
    for (p, g) in params.layers().iter().zip(grads.layers()) {
        for ((scale, row), gb) in unit_norms(p).into_iter().zip(g.weights.axis_iter(Axis(0))).zip(g.bias.iter()) {
            total += scale * scale * (row.dot(&row) + gb * gb);
        }
    }
    Ok(total.sqrt())
}

/// Standard normal direction shaped like `params`.
pub fn random_direction(params: &ModelParams, seed: u64) -> Gradients {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::Stream::Direction as u64]));
    let mut d = Gradients::zeros_like(params);
    for l in d.layers_mut() {
        l.weights.mapv_inplace(|_| rng.sample(StandardNormal));
        l.bias.mapv_inplace(|_| rng.sample(StandardNormal));
    }
    d
}

/// Rescales every unit row of `direction` to the norm of the matching row of
/// `params`. Rows with zero norm in `direction` stay zero.
pub fn filter_normalize_direction(params: &ModelParams, direction: &Gradients) -> Result<Gradients> {
    direction.check_congruent(params)?;
    let mut out = direction.clone();
    for (p, d) in params.layers().iter().zip(out.layers_mut()) {
        let target = unit_norms(p);
        let current = unit_norms(d);
        for (i, (t, c)) in target.into_iter().zip(current).enumerate() {
            let s = if c > 0.0 { t / c } else { 0.0 };
            d.weights.row_mut(i).mapv_inplace(|v| v * s);
            d.bias[i] *= s;
        }
    }
    Ok(out)
}

/// The three models compared in a flatness plot.
#[derive(Clone, Debug, Default)]
pub struct ProbedModels {
    /// Parameters when the training loss first went below the flood level.
    pub first_submersion: Option<ModelParams>,
    pub flooded_final: Option<ModelParams>,
    pub baseline_final: Option<ModelParams>,
}

impl ProbedModels {
    pub const NAMES: [&'static str; 3] = ["first_submersion", "flooded_final", "baseline_final"];

    fn named(&self) -> [(&'static str, &Option<ModelParams>); 3] {
        [
            (Self::NAMES[0], &self.first_submersion),
            (Self::NAMES[1], &self.flooded_final),
            (Self::NAMES[2], &self.baseline_final),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessCurve {
    pub model: String,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessProfile {
    pub direction_seed: u64,
    pub radii: Vec<f64>,
    pub curves: Vec<FlatnessCurve>,
}

/// 51 evenly spaced radii in `[-1, 1]`.
pub fn default_radii() -> Vec<f64> {
    (0..=50).map(|i| -1.0 + i as f64 / 25.0).collect()
}

/// Train and test loss along one random filter-normalized direction for each
/// probed model. The raw direction is drawn once from `direction_seed` and
/// normalized against each model separately.
pub fn flatness_profile(
    models: &ProbedModels,
    train: &LabeledDataset,
    test: &LabeledDataset,
    loss: LossKind,
    radii: &[f64],
    direction_seed: u64,
) -> Result<FlatnessProfile> {
    if !radii.contains(&0.0) {
        return Err(FloodError::InvalidSpec("radii must include 0".into()));
    }
    if let Some(r) = radii.iter().find(|r| !r.is_finite()) {
        return Err(FloodError::InvalidSpec(format!("radius {r} is not finite")));
    }
    let mut present = Vec::with_capacity(3);
    for (name, m) in models.named() {
        let m = m
            .as_ref()
            .ok_or_else(|| FloodError::MissingCheckpoint(format!("no {name} model was provided")))?;
        present.push((name, m));
    }
    let reference = present[0].1;
    if present.iter().any(|(_, m)| m.layer_sizes() != reference.layer_sizes()) {
        return Err(FloodError::Shape("probed models have different architectures".into()));
    }
    let raw = random_direction(reference, direction_seed);
    let mut curves = Vec::with_capacity(3);
    for (name, params) in present {
        let dir = filter_normalize_direction(params, &raw)?;
        let mut train_loss = Vec::with_capacity(radii.len());
        let mut test_loss = Vec::with_capacity(radii.len());
        for &r in radii {
            let moved;
            let p = if r == 0.0 {
                params
            } else {
                moved = params.perturbed(&dir, r)?;
                &moved
            };
            train_loss.push(empirical_risk(p, train, loss)?);
            test_loss.push(empirical_risk(p, test, loss)?);
        }
        curves.push(FlatnessCurve {
            model: name.to_string(),
            train_loss,
            test_loss,
        });
    }
    Ok(FlatnessProfile {
        direction_seed,
        radii: radii.to_vec(),
        curves,
    })
}

impl FlatnessProfile {
    /// Long form: one row per (model, radius).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["model", "radius", "train_loss", "test_loss"])
            .map_err(|e| csv_error(path, e))?;
        for c in &self.curves {
            for ((r, tr), te) in self.radii.iter().zip(&c.train_loss).zip(&c.test_loss) {
                w.write_record([c.model.clone(), fmt_real(*r), fmt_real(*tr), fmt_real(*te)])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| FloodError::Io {
            path: path.into(),
            source: e,
        })
    }
}

/// Train accuracy of one run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationRow {
    pub b: f64,
    pub trial: usize,
    pub final_train_accuracy: f64,
    pub early_stop_train_accuracy: f64,
    /// This b was selected for this trial (final-epoch variant).
    pub selected_final: bool,
    /// This b was selected for this trial (early-stopping variant).
    pub selected_early_stop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationPoint {
    pub b: f64,
    pub mean_final_train_accuracy: f64,
    pub mean_early_stop_train_accuracy: f64,
    pub times_selected_final: usize,
    pub times_selected_early_stop: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationCurve {
    pub points: Vec<MemorizationPoint>,
    pub rows: Vec<MemorizationRow>,
}

/// Mean train accuracy per flood level, with the per-trial selections marked.
pub fn memorization_curve(sweep: &SweepResult) -> MemorizationCurve {
    let mut rows = Vec::with_capacity(sweep.runs.len());
    for run in &sweep.runs {
        let sel = &sweep.selections[run.trial];
        rows.push(MemorizationRow {
            b: run.b,
            trial: run.trial,
            final_train_accuracy: 1.0 - run.final_train_error,
            early_stop_train_accuracy: 1.0 - run.early_stop_train_error,
            selected_final: sel.final_b_index == run.b_index,
            selected_early_stop: sel.early_stop_b_index == run.b_index,
        });
    }
    let points = sweep
        .grid
        .iter()
        .map(|&b| {
            let at: Vec<&MemorizationRow> = rows.iter().filter(|r| r.b == b).collect();
            let fin: Vec<f64> = at.iter().map(|r| r.final_train_accuracy).collect();
            let early: Vec<f64> = at.iter().map(|r| r.early_stop_train_accuracy).collect();
            MemorizationPoint {
                b,
                mean_final_train_accuracy: mean(&fin),
                mean_early_stop_train_accuracy: mean(&early),
                times_selected_final: at.iter().filter(|r| r.selected_final).count(),
                times_selected_early_stop: at.iter().filter(|r| r.selected_early_stop).count(),
            }
        })
        .collect();
    MemorizationCurve { points, rows }
}

impl MemorizationCurve {
    /// Whether the mean final train accuracy never rises by more than `tol`
    /// from one flood level to a larger one.
    pub fn is_non_increasing(&self, tol: f64) -> bool {
        let acc: Vec<f64> = self.points.iter().map(|p| p.mean_final_train_accuracy).collect();
        acc.iter()
            .enumerate()
            .all(|(i, a)| acc[i + 1..].iter().all(|later| *later <= a + tol))
    }

    /// Long form: one row per (b, trial).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record([
            "b",
            "trial",
            "final_train_accuracy",
            "early_stop_train_accuracy",
            "selected_final",
            "selected_early_stop",
        ])
        .map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.write_record([
                fmt_real(r.b),
                r.trial.to_string(),
                fmt_real(r.final_train_accuracy),
                fmt_real(r.early_stop_train_accuracy),
                r.selected_final.to_string(),
                r.selected_early_stop.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| FloodError::Io {
            path: path.into(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SplitSizes, SyntheticSpec};
    use crate::nn::init_mlp;
    use ndarray::array;

    #[test]
    fn grad_norm_hand_example() {
        let p = ModelParams::new(vec![DenseLayer {
            weights: array![[3.0, 4.0]],
            bias: array![0.0],
        }])
        .unwrap();
        let g = Gradients::from_layers(vec![DenseLayer {
            weights: array![[1.0, 0.0]],
            bias: array![0.0],
        }]);
        assert!((filter_normalized_grad_norm(&p, &g).unwrap() - 5.0).abs() < 1e-15);
        let z = Gradients::zeros_like(&p);
        assert_eq!(filter_normalized_grad_norm(&p, &z).unwrap(), 0.0);
    }

    #[test]
    fn grad_norm_is_absolutely_homogeneous() {
        let p = init_mlp(&[4, 6, 3], 2).unwrap();
        let g = random_direction(&p, 9);
        let base = filter_normalized_grad_norm(&p, &g).unwrap();
        for c in [-3.0, -0.5, 0.0, 2.0] {
            let mut s = g.clone();
            s.scale(c);
            let v = filter_normalized_grad_norm(&p, &s).unwrap();
            assert!((v - c.abs() * base).abs() <= 1e-12 * base.max(1.0));
        }
        let other = init_mlp(&[4, 5, 3], 2).unwrap();
        assert!(filter_normalized_grad_norm(&other, &g).is_err());
    }

    #[test]
    fn normalized_direction_matches_row_norms() {
        let p = init_mlp(&[3, 5, 2], 4).unwrap();
        let d = filter_normalize_direction(&p, &random_direction(&p, 1)).unwrap();
        for (pl, dl) in p.layers().iter().zip(d.layers()) {
            for (a, b) in unit_norms(pl).iter().zip(unit_norms(dl)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn splits() -> (LabeledDataset, LabeledDataset) {
        let mut spec = SyntheticSpec::two_gaussians(1);
        spec.sizes = SplitSizes {
            train: 30,
            validation: 10,
            test: 40,
        };
        let s = generate(&spec).unwrap();
        (s.train, s.test)
    }

    #[test]
    fn flatness_radius_zero_is_exact() {
        let (train, test) = splits();
        let models = ProbedModels {
            first_submersion: Some(init_mlp(&[10, 8, 1], 1).unwrap()),
            flooded_final: Some(init_mlp(&[10, 8, 1], 2).unwrap()),
            baseline_final: Some(init_mlp(&[10, 8, 1], 3).unwrap()),
        };
        let radii = default_radii();
        assert_eq!(radii.len(), 51);
        assert_eq!(radii[25], 0.0);
        assert_eq!((radii[0], radii[50]), (-1.0, 1.0));
        let prof = flatness_profile(&models, &train, &test, LossKind::Logistic, &radii, 7).unwrap();
        assert_eq!(prof.curves.len(), 3);
        for (c, m) in prof.curves.iter().zip([&models.first_submersion, &models.flooded_final, &models.baseline_final]) {
            let m = m.as_ref().unwrap();
            assert_eq!(c.train_loss[25], empirical_risk(m, &train, LossKind::Logistic).unwrap());
            assert_eq!(c.test_loss[25], empirical_risk(m, &test, LossKind::Logistic).unwrap());
        }
        let again = flatness_profile(&models, &train, &test, LossKind::Logistic, &radii, 7).unwrap();
        assert_eq!(prof, again);
    }

    #[test]
    fn flatness_errors() {
        let (train, test) = splits();
        let p = init_mlp(&[10, 8, 1], 1).unwrap();
        let partial = ProbedModels {
            first_submersion: None,
            flooded_final: Some(p.clone()),
            baseline_final: Some(p.clone()),
        };
        assert!(matches!(
            flatness_profile(&partial, &train, &test, LossKind::Logistic, &[0.0], 1),
            Err(FloodError::MissingCheckpoint(_))
        ));
        let full = ProbedModels {
            first_submersion: Some(p.clone()),
            ..partial
        };
        assert!(flatness_profile(&full, &train, &test, LossKind::Logistic, &[0.5], 1).is_err());
    }
}
