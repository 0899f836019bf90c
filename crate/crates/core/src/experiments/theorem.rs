//! Monte Carlo comparison of the mean squared errors of the empirical risk
//! `R_hat` and the flooded risk `R_tilde = |R_hat - b| + b` as estimators of
//! the true risk `R(g)` of a fixed model `g`.
//!
//! Per draw, `(R_hat - R)^2 - (R_tilde - R)^2` equals
//! `B = -4 (b - R_hat)(b - R)` when `R_hat < b` and zero otherwise, so the
//! MSE gap is `E[B]`, which is non-negative whenever `b <= R`.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{sinusoid_label, LabelSpace, LabeledDataset, SyntheticSpec, SyntheticVariant};
use crate::error::{FloodError, Result};
use crate::io::{csv_error, csv_writer, fmt_real};
use crate::nn::{backward, forward, DenseLayer, ModelParams};
use crate::objectives::{check_flood_level, empirical_risk, flooded, mean_loss_and_grad, LossKind};
use crate::seeds;

/// Rows drawn at once when estimating the true risk.
const ORACLE_CHUNK: usize = 100_000;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// `B` for one draw: zero when `r_hat >= b`, else `-4 (b - r_hat)(b - r)`.
pub fn pointwise_b(r_hat: f64, b: f64, r: f64) -> f64 {
    if r_hat >= b {
        0.0
    } else {
        -4.0 * (b - r_hat) * (b - r)
    }
}

/// Bayes error of the two-Gaussian problem, `Phi(-m sqrt(d) / 2)`, raised to
/// `rho + (1 - 2 rho) Phi(-m sqrt(d) / 2)` under symmetric label noise.
pub fn bayes_error_two_gaussians(spec: &SyntheticSpec) -> Result<f64> {
    let SyntheticVariant::TwoGaussians { dim, m } = spec.variant else {
        return Err(FloodError::Unsupported(format!(
            "analytic Bayes error is only available for two gaussians, got {:?}",
            spec.variant
        )));
    };
    let clean = std_normal_cdf(-m.abs() * (dim as f64).sqrt() / 2.0);
    let rho = spec.noise_rate;
    Ok(rho + (1.0 - 2.0 * rho) * clean)
}

pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Draws `n` i.i.d. points from the population of `spec`; each label is
/// flipped independently with probability `spec.noise_rate`.
pub fn sample_population<R: Rng>(spec: &SyntheticSpec, n: usize, rng: &mut R) -> Result<LabeledDataset> {
    spec.validate()?;
    let d = spec.dim();
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for mut row in x.rows_mut() {
        let y = match spec.variant {
            SyntheticVariant::TwoGaussians { m, .. } => {
                let y = if rng.random_bool(0.5) { 1 } else { -1 };
                let shift = if y == 1 { 0.0 } else { m };
                for v in row.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = shift + z;
                }
                y
            }
            SyntheticVariant::Sinusoid { w, w_prime } => {
                let p: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                row[0] = p[0];
                row[1] = p[1];
                sinusoid_label(p, w, w_prime)
            }
            SyntheticVariant::Spiral { .. } => {
                return Err(FloodError::Unsupported(
                    "the spiral design is a deterministic grid, not an i.i.d. population".into(),
                ))
            }
        };
        let flip = spec.noise_rate > 0.0 && rng.random_bool(spec.noise_rate);
        labels.push(if flip { -y } else { y });
    }
    LabeledDataset::new(x, labels, LabelSpace::Binary)
}

/// Fits a linear scorer by full-batch gradient descent on the logistic loss
/// over one small sample. The result is then held fixed by the probe.
pub fn fit_linear_probe(spec: &SyntheticSpec, n_fit: usize, steps: usize, lr: f64, seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::Stream::Probe as u64, 0]));
    let sample = sample_population(spec, n_fit, &mut rng)?;
    let mut params = ModelParams::new(vec![DenseLayer::zeros(1, spec.dim())])?;
    for _ in 0..steps {
        let trace = forward(&params, sample.features().view())?;
        let (_, cot) = mean_loss_and_grad(trace.scores.view(), sample.labels(), LossKind::Logistic)?;
        let g = backward(&params, &trace, cot.view())?;
        params = params.perturbed(&g, -lr)?;
    }
    Ok(params)
}

/// Monte Carlo estimate of `R(g)` from `oracle_size` fresh points.
pub fn estimate_true_risk(
    spec: &SyntheticSpec,
    probe: &ModelParams,
    loss: LossKind,
    oracle_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::Stream::Probe as u64, 1]));
    let mut total = 0.0;
    let mut remaining = oracle_size;
    while remaining > 0 {
        let m = remaining.min(ORACLE_CHUNK);
        let chunk = sample_population(spec, m, &mut rng)?;
        total += empirical_risk(probe, &chunk, loss)? * m as f64;
        remaining -= m;
    }
    Ok(total / oracle_size as f64)
}

/// Setup of one Monte Carlo experiment. The model `probe` stays fixed for
/// every draw.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoremProbe {
    pub spec: SyntheticSpec,
    pub probe: ModelParams,
    pub loss: LossKind,
    pub b: f64,
    /// Sample size of each empirical risk.
    pub n: usize,
    pub n_draws: usize,
    /// Size of the sample used to estimate `R(g)`; at least one million.
    pub oracle_size: usize,
    pub seed: u64,
}

pub const MIN_ORACLE_SIZE: usize = 1_000_000;
pub const MIN_DRAWS: usize = 100;
/// Minimum frequency of `R_hat < b` for the strict inequality check.
pub const STRICT_MIN_FREQ: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremResult {
    pub b: f64,
    pub true_risk: f64,
    pub oracle_size: usize,
    pub n: usize,
    pub n_draws: usize,
    pub mse_hat: f64,
    pub mse_tilde: f64,
    /// `mse_hat - mse_tilde`.
    pub gap: f64,
    /// 95% normal-approximation half-width for `gap`.
    pub ci_half_width: f64,
    /// Fraction of draws with `R_hat < b`.
    pub freq_below: f64,
    /// Mean of `pointwise_b` over the draws.
    pub mean_b: f64,
    /// `b <= R(g)`: the weak inequality is guaranteed.
    pub precondition: bool,
    /// `b < R(g)` and more than 5% of draws fell below `b`.
    pub strict_precondition: bool,
    /// `R_hat` of every draw, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub r_hats: Vec<f64>,
}

/// Runs the probe with its own oracle estimate of `R(g)`.
pub fn mse_gap_monte_carlo(probe: &TheoremProbe) -> Result<TheoremResult> {
    check_probe(probe)?;
    let r = estimate_true_risk(&probe.spec, &probe.probe, probe.loss, probe.oracle_size, probe.seed)?;
    mse_gap_with_risk(probe, r)
}

fn check_probe(probe: &TheoremProbe) -> Result<()> {
    check_flood_level(probe.b)?;
    if probe.n == 0 {
        return Err(FloodError::InvalidSpec("n must be >= 1".into()));
    }
    if probe.n_draws < MIN_DRAWS {
        return Err(FloodError::InvalidSpec(format!("need at least {MIN_DRAWS} draws, got {}", probe.n_draws)));
    }
    if probe.oracle_size < MIN_ORACLE_SIZE {
        return Err(FloodError::InvalidSpec(format!(
            "oracle sample must have at least {MIN_ORACLE_SIZE} points, got {}",
            probe.oracle_size
        )));
    }
    Ok(())
}

/// Draws the empirical risks of `probe`. Depends only on the probe's seed,
/// distribution, model and `n`, not on `b`.
pub fn draw_empirical_risks(probe: &TheoremProbe) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(probe.seed, &[seeds::Stream::Probe as u64, 2]));
    (0..probe.n_draws)
        .map(|_| {
            let sample = sample_population(&probe.spec, probe.n, &mut rng)?;
            empirical_risk(&probe.probe, &sample, probe.loss)
        })
        .collect()
}

/// Same as [`mse_gap_monte_carlo`] with a precomputed `R(g)`.
pub fn mse_gap_with_risk(probe: &TheoremProbe, true_risk: f64) -> Result<TheoremResult> {
    check_flood_level(probe.b)?;
    let r_hats = draw_empirical_risks(probe)?;
    summarize_draws(probe, true_risk, r_hats)
}

fn summarize_draws(probe: &TheoremProbe, r: f64, r_hats: Vec<f64>) -> Result<TheoremResult> {
    let b = probe.b;
    let k = r_hats.len() as f64;
    let mut se_hat = 0.0;
    let mut se_tilde = 0.0;
    let mut below = 0usize;
    let mut b_sum = 0.0;
    let mut diffs = Vec::with_capacity(r_hats.len());
    for &rh in &r_hats {
        let rt = flooded(rh, b)?.flooded_risk;
        let (eh, et) = ((rh - r).powi(2), (rt - r).powi(2));
        se_hat += eh;
        se_tilde += et;
        diffs.push(eh - et);
        b_sum += pointwise_b(rh, b, r);
        if rh < b {
            below += 1;
        }
    }
    let mse_hat = se_hat / k;
    let mse_tilde = se_tilde / k;
    let mean_diff = diffs.iter().sum::<f64>() / k;
    let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (k - 1.0);
    let freq_below = below as f64 / k;
    Ok(TheoremResult {
        b,
        true_risk: r,
        oracle_size: probe.oracle_size,
        n: probe.n,
        n_draws: probe.n_draws,
        mse_hat,
        mse_tilde,
        gap: mse_hat - mse_tilde,
        ci_half_width: Z_95 * (var / k).sqrt(),
        freq_below,
        mean_b: b_sum / k,
        precondition: b <= r,
        strict_precondition: b < r && freq_below > STRICT_MIN_FREQ,
        r_hats,
    })
}

/// Runs the probe for every `b` in `grid`, sharing the draws and the oracle
/// estimate of `R(g)`.
pub fn theorem_table(template: &TheoremProbe, grid: &[f64]) -> Result<Vec<TheoremResult>> {
    check_probe(template)?;
    let r = estimate_true_risk(&template.spec, &template.probe, template.loss, template.oracle_size, template.seed)?;
    let r_hats = draw_empirical_risks(template)?;
    grid.iter()
        .map(|&b| {
            check_flood_level(b)?;
            let probe = TheoremProbe { b, ..template.clone() };
            summarize_draws(&probe, r, r_hats.clone())
        })
        .collect()
}

pub const THEOREM_CSV_HEADER: [&str; 11] = [
    "b",
    "true_risk",
    "mse_hat",
    "mse_tilde",
    "gap",
    "ci_half_width",
    "freq_below",
    "mean_b",
    "precondition",
    "strict_precondition",
    "b_exceeds_true_risk",
];

pub fn write_theorem_csv(rows: &[TheoremResult], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(THEOREM_CSV_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            fmt_real(r.b),
            fmt_real(r.true_risk),
            fmt_real(r.mse_hat),
            fmt_real(r.mse_tilde),
            fmt_real(r.gap),
            fmt_real(r.ci_half_width),
            fmt_real(r.freq_below),
            fmt_real(r.mean_b),
            r.precondition.to_string(),
            r.strict_precondition.to_string(),
            (!r.precondition).to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| FloodError::Io {
        path: path.into(),
        source: e,
    })
}
