//! Losses, empirical risk, classification error and the flooded transform.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{LabelSpace, LabeledDataset};
use crate::error::{FloodError, Result};
use crate::nn::{predict_scores, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Evaluation only; never differentiated.
    ZeroOne,
    SoftmaxCrossEntropy,
    Logistic,
}

impl LossKind {
    pub fn is_surrogate(self) -> bool {
        !matches!(self, LossKind::ZeroOne)
    }
}

/// Which way the optimizer moves for a flooded objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Raw risk at or above the flood level: ordinary gradient descent.
    Descent,
    /// Raw risk below the flood level: the gradient is negated.
    Ascent,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Descent => 1.0,
            Direction::Ascent => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloodedValue {
    pub raw_risk: f64,
    pub flooded_risk: f64,
    pub direction: Direction,
}

/// Validates a flood level.
pub fn check_flood_level(b: f64) -> Result<()> {
    if b.is_finite() && b >= 0.0 {
        Ok(())
    } else {
        Err(FloodError::InvalidFloodLevel(b))
    }
}

/// `|raw - b| + b`. Equality `raw == b` counts as descent.
pub fn flooded(raw_risk: f64, b: f64) -> Result<FloodedValue> {
    check_flood_level(b)?;
    let direction = if raw_risk >= b {
        Direction::Descent
    } else {
        Direction::Ascent
    };
    // Piecewise form of |r - b| + b: exact when r >= b, and 2b - r never
    // rounds below b.
    let flooded_risk = match direction {
        Direction::Descent => raw_risk,
        Direction::Ascent => 2.0 * b - raw_risk,
    };
    Ok(FloodedValue {
        raw_risk,
        flooded_risk,
        direction,
    })
}

/// Predicted class (1-based) for a score vector; ties go to the largest index.
pub fn predict_class(scores: &[f64]) -> usize {
    let mut best = 0;
    for (z, &v) in scores.iter().enumerate() {
        if v >= scores[best] {
            best = z;
        }
    }
    best + 1
}

/// Binary prediction from a single score. A zero score is a tie between the
/// implicit scores `[0, score]` and resolves to the larger label `+1`.
pub fn predict_binary(score: f64) -> i32 {
    if score >= 0.0 {
        1
    } else {
        -1
    }
}

/// Zero-one loss for a K-vector of scores and a 1-based label.
pub fn zero_one_loss(scores: &[f64], label: usize) -> Result<u8> {
    if scores.is_empty() || label == 0 || label > scores.len() {
        return Err(FloodError::InvalidLabel {
            label: label as i32,
            num_classes: scores.len(),
        });
    }
    Ok(u8::from(predict_class(scores) != label))
}

/// Per-sample softmax cross-entropy with 1-based labels.
///
/// Returns the losses and the per-sample gradients `softmax - onehot`
/// (not divided by the batch size).
pub fn softmax_cross_entropy(
    scores: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(Array1<f64>, Array2<f64>)> {
    let (n, k) = scores.dim();
    if labels.len() != n {
        return Err(FloodError::Shape(format!(
            "{} labels for {n} score rows",
            labels.len()
        )));
    }
    let mut losses = Array1::zeros(n);
    let mut grads = Array2::zeros((n, k));
    for (i, (row, &label)) in scores.rows().into_iter().zip(labels).enumerate() {
        if label == 0 || label > k {
            return Err(FloodError::InvalidLabel {
                label: label as i32,
                num_classes: k,
            });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            grads[[i, j]] = e;
            denom += e;
        }
        losses[i] = denom.ln() - (row[label - 1] - max);
        for j in 0..k {
            grads[[i, j]] /= denom;
        }
        grads[[i, label - 1]] -= 1.0;
    }
    Ok((losses, grads))
}

/// `log(1 + exp(-label * score))` and its derivative with respect to `score`.
pub fn logistic_loss(score: f64, label: i32) -> (f64, f64) {
    let y = f64::from(label.signum());
    let margin = -y * score;
    let loss = if margin > 0.0 {
        margin + (-margin).exp().ln_1p()
    } else {
        margin.exp().ln_1p()
    };
    (loss, -y * sigmoid(margin))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn class_indices(labels: &[i32], k: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| {
            if y >= 1 && (y as usize) <= k {
                Ok(y as usize)
            } else {
                Err(FloodError::InvalidLabel {
                    label: y,
                    num_classes: k,
                })
            }
        })
        .collect()
}

fn check_binary_labels(labels: &[i32]) -> Result<()> {
    match labels.iter().find(|&&y| y != 1 && y != -1) {
        Some(&y) => Err(FloodError::InvalidLabel {
            label: y,
            num_classes: 2,
        }),
        None => Ok(()),
    }
}

fn check_rows(scores: &ArrayView2<f64>, labels: &[i32]) -> Result<()> {
    if scores.nrows() != labels.len() {
        return Err(FloodError::Shape(format!(
            "{} labels for {} score rows",
            labels.len(),
            scores.nrows()
        )));
    }
    if scores.nrows() == 0 {
        return Err(FloodError::EmptyData);
    }
    Ok(())
}

/// Per-sample losses for a batch of scores.
///
/// Binary problems use one score column with labels `±1`; multi-class
/// problems use `K` columns with labels `1..=K`.
pub fn per_sample_losses(scores: ArrayView2<f64>, labels: &[i32], loss: LossKind) -> Result<Vec<f64>> {
    check_rows(&scores, labels)?;
    match loss {
        LossKind::Logistic => {
            binary_column(&scores)?;
            check_binary_labels(labels)?;
            Ok(scores
                .column(0)
                .iter()
                .zip(labels)
                .map(|(&s, &y)| logistic_loss(s, y).0)
                .collect())
        }
        LossKind::SoftmaxCrossEntropy => {
            let idx = class_indices(labels, scores.ncols())?;
            Ok(softmax_cross_entropy(scores, &idx)?.0.to_vec())
        }
        LossKind::ZeroOne => zero_one_column(scores, labels),
    }
}

fn binary_column(scores: &ArrayView2<f64>) -> Result<()> {
    if scores.ncols() != 1 {
        return Err(FloodError::Shape(format!(
            "logistic loss needs one score column, got {}",
            scores.ncols()
        )));
    }
    Ok(())
}

fn zero_one_column(scores: ArrayView2<f64>, labels: &[i32]) -> Result<Vec<f64>> {
    if scores.ncols() == 1 {
        check_binary_labels(labels)?;
        Ok(scores
            .column(0)
            .iter()
            .zip(labels)
            .map(|(&s, &y)| if predict_binary(s) == y { 0.0 } else { 1.0 })
            .collect())
    } else {
        let idx = class_indices(labels, scores.ncols())?;
        scores
            .rows()
            .into_iter()
            .zip(idx)
            .map(|(row, y)| {
                let v = row.to_vec();
                zero_one_loss(&v, y).map(f64::from)
            })
            .collect()
    }
}

/// Mean surrogate loss of a batch and its gradient with respect to the scores
/// (already divided by the batch size).
pub fn mean_loss_and_grad(
    scores: ArrayView2<f64>,
    labels: &[i32],
    loss: LossKind,
) -> Result<(f64, Array2<f64>)> {
    check_rows(&scores, labels)?;
    let n = labels.len() as f64;
    match loss {
        LossKind::Logistic => {
            binary_column(&scores)?;
            check_binary_labels(labels)?;
            let mut grad = Array2::zeros(scores.dim());
            let mut total = 0.0;
            for (i, (&s, &y)) in scores.column(0).iter().zip(labels).enumerate() {
                let (l, g) = logistic_loss(s, y);
                total += l;
                grad[[i, 0]] = g / n;
            }
            Ok((total / n, grad))
        }
        LossKind::SoftmaxCrossEntropy => {
            let idx = class_indices(labels, scores.ncols())?;
            let (losses, mut grad) = softmax_cross_entropy(scores, &idx)?;
            grad /= n;
            Ok((losses.sum() / n, grad))
        }
        LossKind::ZeroOne => Err(FloodError::Unsupported(
            "the zero-one loss is evaluation-only".into(),
        )),
    }
}

/// Mean loss and classification error of one evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub error: f64,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.error
    }
}

/// Loss and zero-one error from precomputed scores.
pub fn evaluate_scores(scores: ArrayView2<f64>, labels: &[i32], loss: LossKind) -> Result<Evaluation> {
    let n = labels.len() as f64;
    let losses = per_sample_losses(scores, labels, loss)?;
    let errors = zero_one_column(scores, labels)?;
    Ok(Evaluation {
        loss: losses.iter().sum::<f64>() / n,
        error: errors.iter().sum::<f64>() / n,
    })
}

/// One forward pass over a dataset, reporting loss and error together.
pub fn evaluate(params: &ModelParams, data: &LabeledDataset, loss: LossKind) -> Result<Evaluation> {
    check_model_fits(params, data, loss)?;
    let scores = predict_scores(params, data.features().view())?;
    evaluate_scores(scores.view(), data.labels(), loss)
}

/// Mean per-sample loss over `data`.
pub fn empirical_risk(params: &ModelParams, data: &LabeledDataset, loss: LossKind) -> Result<f64> {
    check_model_fits(params, data, loss)?;
    let scores = predict_scores(params, data.features().view())?;
    let losses = per_sample_losses(scores.view(), data.labels(), loss)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Empirical zero-one risk; accuracy is `1 - error`.
pub fn classification_error(params: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    empirical_risk(params, data, LossKind::ZeroOne)
}

/// Checks that the output layer and loss agree with the dataset's label space.
pub fn check_model_fits(params: &ModelParams, data: &LabeledDataset, loss: LossKind) -> Result<()> {
    if data.is_empty() {
        return Err(FloodError::EmptyData);
    }
    if params.input_dim() != data.dim() {
        return Err(FloodError::Shape(format!(
            "network input {} but data has {} features",
            params.input_dim(),
            data.dim()
        )));
    }
    let expected_out = match data.label_space() {
        LabelSpace::Binary => 1,
        LabelSpace::MultiClass(k) => k,
    };
    if params.output_dim() != expected_out {
        return Err(FloodError::Shape(format!(
            "network has {} outputs but the labels need {expected_out}",
            params.output_dim()
        )));
    }
    match (loss, data.label_space()) {
        (LossKind::Logistic, LabelSpace::MultiClass(_)) => Err(FloodError::Unsupported(
            "logistic loss on multi-class labels".into(),
        )),
        (LossKind::SoftmaxCrossEntropy, LabelSpace::Binary) => Err(FloodError::Unsupported(
            "softmax cross-entropy on a single-output binary problem".into(),
        )),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_mlp, DenseLayer};
    use ndarray::array;

    #[test]
    fn zero_one_examples() {
        assert_eq!(zero_one_loss(&[0.1, 0.9], 2).unwrap(), 0);
        assert_eq!(zero_one_loss(&[0.5, 0.5], 2).unwrap(), 0);
        assert_eq!(zero_one_loss(&[0.5, 0.5], 1).unwrap(), 1);
        assert!(matches!(zero_one_loss(&[0.5, 0.5], 3), Err(FloodError::InvalidLabel { .. })));
        assert!(matches!(zero_one_loss(&[0.5, 0.5], 0), Err(FloodError::InvalidLabel { .. })));
    }

    #[test]
    fn binary_tie_goes_to_positive() {
        assert_eq!(predict_binary(0.0), 1);
        assert_eq!(predict_binary(-1e-300), -1);
    }

    #[test]
    fn softmax_examples() {
        let scores = Array2::zeros((3, 10));
        let (l, _) = softmax_cross_entropy(scores.view(), &[1, 5, 10]).unwrap();
        for v in l.iter() {
            assert!((v - 10f64.ln()).abs() < 1e-12);
        }
        let (l, g) = softmax_cross_entropy(array![[1000.0, 0.0]].view(), &[1]).unwrap();
        assert!(l[0].abs() < 1e-12 && l[0].is_finite());
        assert!(g.iter().all(|v| v.is_finite()));
        let (_, g) = softmax_cross_entropy(array![[0.0, 0.0]].view(), &[1]).unwrap();
        assert_eq!(g, array![[-0.5, 0.5]]);
    }

    #[test]
    fn softmax_shift_invariant() {
        let s = array![[0.3, -2.0, 1.7, 0.0]];
        let shifted = &s + 123.456;
        let (a, _) = softmax_cross_entropy(s.view(), &[3]).unwrap();
        let (b, _) = softmax_cross_entropy(shifted.view(), &[3]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12);
        assert!(a[0] >= 0.0);
    }

    #[test]
    fn logistic_examples() {
        for y in [-1, 1] {
            assert!((logistic_loss(0.0, y).0 - 2f64.ln()).abs() < 1e-15);
        }
        let (l, g) = logistic_loss(50.0, 1);
        assert!((0.0..1e-20).contains(&l));
        assert!(g.is_finite());
        let (l, _) = logistic_loss(-800.0, 1);
        assert!((l - 800.0).abs() < 1e-9);
        assert_eq!(logistic_loss(0.0, 1).1, -0.5);
        assert_eq!(logistic_loss(0.0, -1).1, 0.5);
    }

    #[test]
    fn flooded_examples() {
        let v = flooded(0.5, 0.1).unwrap();
        assert_eq!((v.flooded_risk, v.direction), (0.5, Direction::Descent));
        let v = flooded(0.05, 0.1).unwrap();
        assert!((v.flooded_risk - 0.15).abs() < 1e-15);
        assert_eq!(v.direction, Direction::Ascent);
        for r in [0.0, 0.3, 7.0] {
            assert_eq!(flooded(r, 0.0).unwrap().flooded_risk, r);
        }
        assert_eq!(flooded(0.2, 0.2).unwrap().direction, Direction::Descent);
        assert!(matches!(flooded(0.2, -0.1), Err(FloodError::InvalidFloodLevel(_))));
        assert!(matches!(flooded(0.2, f64::NAN), Err(FloodError::InvalidFloodLevel(_))));
    }

    fn linear_binary() -> (ModelParams, LabeledDataset) {
        let p = ModelParams::new(vec![DenseLayer {
            weights: array![[1.0, -0.5]],
            bias: array![0.2],
        }])
        .unwrap();
        let x = array![[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0], [0.5, 0.5]];
        let d = LabeledDataset::new(x, vec![1, 1, -1, -1], LabelSpace::Binary).unwrap();
        (p, d)
    }

    #[test]
    fn empirical_risk_matches_hand_mean() {
        let (p, d) = linear_binary();
        // scores: 1.2, -0.8, -1.3, 0.45
        let hand = [
            (1.0f64 + (-1.2f64).exp()).ln(),
            (1.0f64 + (0.8f64).exp()).ln(),
            (1.0f64 + (-1.3f64).exp()).ln(),
            (1.0f64 + (0.45f64).exp()).ln(),
        ];
        let mean = hand.iter().sum::<f64>() / 4.0;
        assert!((empirical_risk(&p, &d, LossKind::Logistic).unwrap() - mean).abs() < 1e-14);
        // samples 1 and 3 correct, 2 and 4 wrong
        assert_eq!(classification_error(&p, &d).unwrap(), 0.5);
        let single = d.subset(&[0]);
        assert!((empirical_risk(&p, &single, LossKind::Logistic).unwrap() - hand[0]).abs() < 1e-15);
    }

    #[test]
    fn classification_error_counts() {
        let (p, _) = linear_binary();
        let x = array![[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0], [0.5, 0.5]];
        let all_right = LabeledDataset::new(x.clone(), vec![1, -1, -1, 1], LabelSpace::Binary).unwrap();
        assert_eq!(classification_error(&p, &all_right).unwrap(), 0.0);
        let all_wrong = LabeledDataset::new(x.clone(), vec![-1, 1, 1, -1], LabelSpace::Binary).unwrap();
        assert_eq!(classification_error(&p, &all_wrong).unwrap(), 1.0);
        let three = LabeledDataset::new(x, vec![1, -1, -1, -1], LabelSpace::Binary).unwrap();
        assert_eq!(classification_error(&p, &three).unwrap(), 0.25);
    }

    #[test]
    fn empty_and_mismatched_data() {
        assert!(matches!(
            LabeledDataset::new(Array2::zeros((0, 2)), vec![], LabelSpace::Binary),
            Err(FloodError::EmptyData)
        ));
        let multi = init_mlp(&[2, 3], 0).unwrap();
        let d = LabeledDataset::new(array![[0.0, 1.0]], vec![3], LabelSpace::MultiClass(3)).unwrap();
        assert!(matches!(
            empirical_risk(&multi, &d, LossKind::Logistic),
            Err(FloodError::Unsupported(_))
        ));
        assert!(empirical_risk(&multi, &d, LossKind::SoftmaxCrossEntropy).is_ok());
    }

    #[test]
    fn zero_one_is_not_differentiable() {
        assert!(matches!(
            mean_loss_and_grad(array![[0.0]].view(), &[1], LossKind::ZeroOne),
            Err(FloodError::Unsupported(_))
        ));
    }
}
