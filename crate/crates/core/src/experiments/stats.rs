//! Summary statistics and Welch's two-sample t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{FloodError, Result};

/// Mean and sample standard deviation (`n - 1` denominator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len();
        let mean = mean(values);
        let std = if n > 1 { sample_variance(values, mean).sqrt() } else { 0.0 };
        MeanStd { mean, std, n }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_variance(values: &[f64], mean: f64) -> f64 {
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t_statistic: f64,
    pub dof: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub alpha: f64,
    pub significant: bool,
}

/// Two-sided Welch test of equal means with Welch–Satterthwaite degrees of
/// freedom.
///
/// When both samples have zero variance the test is decided by the means
/// alone: equal means are not significant, different means are.
pub fn welch_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(FloodError::InvalidSpec(format!(
            "t-test needs two observations per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FloodError::InvalidSpec(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a, ma) / na, sample_variance(b, mb) / nb);
    let se2 = va + vb;
    if se2 == 0.0 {
        let equal = ma == mb;
        return Ok(WelchResult {
            t_statistic: if equal { 0.0 } else { (ma - mb).signum() * f64::INFINITY },
            dof: na + nb - 2.0,
            p_value: if equal { 1.0 } else { 0.0 },
            alpha,
            significant: !equal,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| FloodError::Numeric(e.to_string()))?;
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    let critical = dist.inverse_cdf(1.0 - alpha / 2.0);
    Ok(WelchResult {
        t_statistic: t,
        dof,
        p_value,
        alpha,
        significant: t.abs() > critical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identical_samples() {
        let a = [0.3, 0.1, 0.7, 0.2];
        let r = welch_t_test(&a, &a, 0.01).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert!(!r.significant);
    }

    #[test]
    fn separated_samples() {
        let a = [0.0, 1e-9, 0.0, -1e-9];
        let b = [1.0, 1.0 + 1e-9, 1.0, 1.0 - 1e-9];
        let r = welch_t_test(&a, &b, 0.01).unwrap();
        assert!(r.significant && r.t_statistic < 0.0);
    }

    #[test]
    fn degenerate_zero_variance() {
        let r = welch_t_test(&[1.0, 1.0], &[1.0, 1.0, 1.0], 0.01).unwrap();
        assert!(!r.significant);
        let r = welch_t_test(&[1.0, 1.0], &[2.0, 2.0], 0.01).unwrap();
        assert!(r.significant);
    }

    #[test]
    fn matches_reference_values() {
        // scipy.stats.ttest_ind(a, b, equal_var=False)
        let a = [19.1, 20.3, 18.7, 21.2, 19.9];
        let b = [22.4, 21.8, 23.9, 22.1];
        let r = welch_t_test(&a, &b, 0.05).unwrap();
        assert!((r.t_statistic - -4.216398919684334).abs() < 1e-10);
        assert!((r.dof - 6.736179515023338).abs() < 1e-10);
        assert!((r.p_value - 0.00431011193573395).abs() < 1e-8);
        assert!(r.significant);
        assert!(!welch_t_test(&a, &b, 0.001).unwrap().significant);
    }

    #[test]
    fn errors() {
        assert!(welch_t_test(&[1.0], &[1.0, 2.0], 0.01).is_err());
        assert!(welch_t_test(&[1.0, 2.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn null_rejection_rate_near_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let reps = 1000;
        let mut rejections = 0;
        for _ in 0..reps {
            let a: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
            if welch_t_test(&a, &b, 0.01).unwrap().significant {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        assert!(rate <= 0.02, "rejection rate {rate}");
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[2.0]).std, 0.0);
    }
}
