//! Labeled datasets, synthetic generators, label noise, splits and IDX files.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};
use crate::io::{csv_error, csv_writer, fmt_real};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    /// Labels in `{-1, +1}`, scored by a single output unit.
    Binary,
    /// Labels in `1..=K`.
    MultiClass(usize),
}

impl LabelSpace {
    pub fn num_classes(self) -> usize {
        match self {
            LabelSpace::Binary => 2,
            LabelSpace::MultiClass(k) => k,
        }
    }

    pub fn contains(self, label: i32) -> bool {
        match self {
            LabelSpace::Binary => label == 1 || label == -1,
            LabelSpace::MultiClass(k) => label >= 1 && (label as usize) <= k,
        }
    }

    /// Number of output units a scoring network needs.
    pub fn output_units(self) -> usize {
        match self {
            LabelSpace::Binary => 1,
            LabelSpace::MultiClass(k) => k,
        }
    }
}

/// Feature matrix (`n x d`) with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<i32>,
    space: LabelSpace,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<i32>, space: LabelSpace) -> Result<Self> {
        if labels.is_empty() || features.nrows() == 0 {
            return Err(FloodError::EmptyData);
        }
        if features.nrows() != labels.len() {
            return Err(FloodError::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let LabelSpace::MultiClass(0) = space {
            return Err(FloodError::InvalidSpec("zero classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| !space.contains(y)) {
            return Err(FloodError::InvalidLabel {
                label: bad,
                num_classes: space.num_classes(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FloodError::Numeric("non-finite feature".into()));
        }
        Ok(LabeledDataset {
            features,
            labels,
            space,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn label_space(&self) -> LabelSpace {
        self.space
    }

    pub fn num_classes(&self) -> usize {
        self.space.num_classes()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in that order. Panics on an empty or out-of-range
    /// index list.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        assert!(!indices.is_empty(), "empty subset");
        LabeledDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            space: self.space,
        }
    }

    /// Same features with replacement labels.
    pub fn with_labels(&self, labels: Vec<i32>) -> Result<LabeledDataset> {
        LabeledDataset::new(self.features.clone(), labels, self.space)
    }

    /// CSV with columns `x1..xd,label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (row, y) in self.features.rows().into_iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| crate::error::FloodError::Io {
            path: path.into(),
            source: e,
        })
    }
}

/// Train, validation and test data with matching dimensions and label space.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

impl SplitDataset {
    pub fn new(train: LabeledDataset, validation: LabeledDataset, test: LabeledDataset) -> Result<Self> {
        for other in [&validation, &test] {
            if other.dim() != train.dim() || other.label_space() != train.label_space() {
                return Err(FloodError::Consistency(
                    "splits disagree on dimension or label space".into(),
                ));
            }
        }
        Ok(SplitDataset {
            train,
            validation,
            test,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticVariant {
    /// Class +1 ~ N(0, I), class -1 ~ N([m..m], I).
    TwoGaussians { dim: usize, m: f64 },
    /// x ~ N(0, I_2), y = sign(x.w + sin(x.w')).
    Sinusoid { w: [f64; 2], w_prime: [f64; 2] },
    /// Two interleaved arms over angles in [0, 4 pi].
    Spiral { tau: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 100,
            validation: 100,
            test: 20_000,
        }
    }
}

/// Label-noise presets for the synthetic benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    None,
    Low,
    Middle,
    High,
}

impl NoiseLevel {
    pub fn rate(self) -> f64 {
        match self {
            NoiseLevel::None => 0.0,
            NoiseLevel::Low => 0.01,
            NoiseLevel::Middle => 0.05,
            NoiseLevel::High => 0.10,
        }
    }
}

/// Full recipe for a synthetic [`SplitDataset`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub variant: SyntheticVariant,
    pub sizes: SplitSizes,
    /// Fraction of labels flipped in each split.
    pub noise_rate: f64,
    /// Whether the test split also receives label noise.
    #[serde(default = "default_true")]
    pub noisy_test: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl SyntheticSpec {
    pub fn two_gaussians(seed: u64) -> Self {
        SyntheticSpec {
            variant: SyntheticVariant::TwoGaussians { dim: 10, m: 1.0 },
            sizes: SplitSizes::default(),
            noise_rate: 0.0,
            noisy_test: true,
            seed,
        }
    }

    pub fn sinusoid(seed: u64) -> Self {
        SyntheticSpec {
            variant: SyntheticVariant::Sinusoid {
                w: [1.0, 0.0],
                w_prime: [0.0, 1.0],
            },
            ..SyntheticSpec::two_gaussians(seed)
        }
    }

    pub fn spiral(seed: u64) -> Self {
        SyntheticSpec {
            variant: SyntheticVariant::Spiral { tau: 0.5 },
            ..SyntheticSpec::two_gaussians(seed)
        }
    }

    pub fn with_noise(mut self, level: NoiseLevel) -> Self {
        self.noise_rate = level.rate();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        match self.variant {
            SyntheticVariant::TwoGaussians { dim, .. } => dim,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.sizes;
        if s.train == 0 || s.validation == 0 || s.test == 0 {
            return Err(FloodError::InvalidSpec(format!("split sizes must be positive: {s:?}")));
        }
        check_noise_rate(self.noise_rate)?;
        match self.variant {
            SyntheticVariant::TwoGaussians { dim, m } => {
                if dim == 0 || !m.is_finite() {
                    return Err(FloodError::InvalidSpec(format!(
                        "two gaussians needs dim >= 1 and finite m, got dim={dim}, m={m}"
                    )));
                }
            }
            SyntheticVariant::Sinusoid { w, w_prime } => {
                let dot = w[0] * w_prime[0] + w[1] * w_prime[1];
                if dot.abs() > 1e-12 || w.iter().chain(&w_prime).any(|v| !v.is_finite()) {
                    return Err(FloodError::InvalidSpec(format!(
                        "sinusoid direction vectors must be orthogonal (dot = {dot})"
                    )));
                }
            }
            SyntheticVariant::Spiral { tau } => {
                if !(tau >= 0.0) || !tau.is_finite() {
                    return Err(FloodError::InvalidSpec(format!("spiral tau must be >= 0, got {tau}")));
                }
                if s.train < 4 || s.validation < 4 || s.test < 4 {
                    return Err(FloodError::InvalidSpec(
                        "spiral splits need at least two points per arm".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn check_noise_rate(rate: f64) -> Result<()> {
    if (0.0..=0.5).contains(&rate) {
        Ok(())
    } else {
        Err(FloodError::InvalidSpec(format!(
            "label noise rate must be in [0, 0.5], got {rate}"
        )))
    }
}

/// Builds all three splits of a synthetic problem. Splits are sampled
/// independently; label noise follows `spec.noise_rate` and `spec.noisy_test`.
pub fn generate(spec: &SyntheticSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let sizes = [spec.sizes.train, spec.sizes.validation, spec.sizes.test];
    let mut splits = Vec::with_capacity(3);
    for (k, &n) in sizes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, &[10, k as u64]));
        let clean = match spec.variant {
            SyntheticVariant::TwoGaussians { dim, m } => sample_two_gaussians(dim, m, n, &mut rng),
            SyntheticVariant::Sinusoid { w, w_prime } => sample_sinusoid(w, w_prime, n, &mut rng),
            SyntheticVariant::Spiral { tau } => sample_spiral(tau, n, &mut rng),
        }?;
        let noisy = k < 2 || spec.noisy_test;
        let data = if noisy && spec.noise_rate > 0.0 {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, &[20, k as u64]));
            flip_labels(&clean, spec.noise_rate, &mut noise_rng)?
        } else {
            clean
        };
        splits.push(data);
    }
    let test = splits.pop().unwrap();
    let validation = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    SplitDataset::new(train, validation, test)
}

fn require_variant(spec: &SyntheticSpec, name: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(FloodError::InvalidSpec(format!("expected a {name} spec, got {:?}", spec.variant)))
    }
}

pub fn gen_two_gaussians(spec: &SyntheticSpec) -> Result<SplitDataset> {
    require_variant(spec, "two-gaussians", matches!(spec.variant, SyntheticVariant::TwoGaussians { .. }))?;
    generate(spec)
}

pub fn gen_sinusoid(spec: &SyntheticSpec) -> Result<SplitDataset> {
    require_variant(spec, "sinusoid", matches!(spec.variant, SyntheticVariant::Sinusoid { .. }))?;
    generate(spec)
}

pub fn gen_spiral(spec: &SyntheticSpec) -> Result<SplitDataset> {
    require_variant(spec, "spiral", matches!(spec.variant, SyntheticVariant::Spiral { .. }))?;
    generate(spec)
}

/// Equal-prior draw: the label is a fair coin, then the class-conditional
/// Gaussian is sampled.
pub fn sample_two_gaussians<R: Rng>(dim: usize, m: f64, n: usize, rng: &mut R) -> Result<LabeledDataset> {
    let mut x = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for mut row in x.rows_mut() {
        let y = if rng.random_bool(0.5) { 1 } else { -1 };
        let mean = if y == 1 { 0.0 } else { m };
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = mean + z;
        }
        labels.push(y);
    }
    LabeledDataset::new(x, labels, LabelSpace::Binary)
}

/// Label rule of the sinusoid problem; `sign(0)` is taken as `+1`.
pub fn sinusoid_label(x: [f64; 2], w: [f64; 2], w_prime: [f64; 2]) -> i32 {
    let a = x[0] * w[0] + x[1] * w[1];
    let c = x[0] * w_prime[0] + x[1] * w_prime[1];
    if a + c.sin() >= 0.0 {
        1
    } else {
        -1
    }
}

pub fn sample_sinusoid<R: Rng>(w: [f64; 2], w_prime: [f64; 2], n: usize, rng: &mut R) -> Result<LabeledDataset> {
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for mut row in x.rows_mut() {
        let p: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        row[0] = p[0];
        row[1] = p[1];
        labels.push(sinusoid_label(p, w, w_prime));
    }
    LabeledDataset::new(x, labels, LabelSpace::Binary)
}

/// `count` equally spaced angles covering `[0, 4 pi]`.
pub fn spiral_angles(count: usize) -> Vec<f64> {
    let step = 4.0 * PI / (count - 1) as f64;
    (0..count).map(|i| i as f64 * step).collect()
}

/// Noise-free point on the positive arm.
pub fn spiral_positive(theta: f64) -> [f64; 2] {
    [theta * theta.cos(), theta * theta.sin()]
}

/// Noise-free point on the negative arm: the positive arm rotated by pi.
pub fn spiral_negative(theta: f64) -> [f64; 2] {
    let phi = theta + PI;
    [phi * phi.cos(), phi * phi.sin()]
}

/// `n` points: `ceil(n/2)` on the positive arm then `floor(n/2)` on the
/// negative arm, each perturbed by `tau` times standard normal noise.
pub fn sample_spiral<R: Rng>(tau: f64, n: usize, rng: &mut R) -> Result<LabeledDataset> {
    let n_pos = n.div_ceil(2);
    let n_neg = n / 2;
    if n_pos < 2 || n_neg < 2 {
        return Err(FloodError::InvalidSpec(format!("spiral needs >= 2 points per arm, got n={n}")));
    }
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    let arms = spiral_angles(n_pos)
        .into_iter()
        .map(|t| (spiral_positive(t), 1))
        .chain(spiral_angles(n_neg).into_iter().map(|t| (spiral_negative(t), -1)));
    for (mut row, (p, y)) in x.rows_mut().into_iter().zip(arms) {
        let nu: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        row[0] = p[0] + tau * nu[0];
        row[1] = p[1] + tau * nu[1];
        labels.push(y);
    }
    LabeledDataset::new(x, labels, LabelSpace::Binary)
}

/// Indices of the labels to corrupt: `round(rate * n)` of them, uniformly
/// without replacement.
pub fn flip_indices<R: Rng>(n: usize, rate: f64, rng: &mut R) -> Result<Vec<usize>> {
    check_noise_rate(rate)?;
    let count = ((rate * n as f64).round() as usize).min(n);
    let mut idx = sample(rng, n, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Corrupts the labels at `indices`: binary labels are negated, multi-class
/// labels move to a uniformly chosen different class.
pub fn flip_at<R: Rng>(data: &LabeledDataset, indices: &[usize], rng: &mut R) -> Result<LabeledDataset> {
    let mut labels = data.labels().to_vec();
    for &i in indices {
        let y = *labels
            .get(i)
            .ok_or_else(|| FloodError::InvalidSpec(format!("flip index {i} out of range")))?;
        labels[i] = match data.label_space() {
            LabelSpace::Binary => -y,
            LabelSpace::MultiClass(k) if k < 2 => y,
            LabelSpace::MultiClass(k) => {
                let shift = rng.random_range(1..k as i32);
                (y - 1 + shift) % k as i32 + 1
            }
        };
    }
    data.with_labels(labels)
}

/// Flips exactly `round(rate * n)` labels chosen uniformly at random.
pub fn flip_labels<R: Rng>(data: &LabeledDataset, rate: f64, rng: &mut R) -> Result<LabeledDataset> {
    let idx = flip_indices(data.len(), rate, rng)?;
    flip_at(data, &idx, rng)
}

/// Random partition into `floor(p * n)` training rows and the rest.
pub fn split_train_val<R: Rng>(
    data: &LabeledDataset,
    proportion: f64,
    rng: &mut R,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(proportion > 0.0 && proportion < 1.0) {
        return Err(FloodError::InvalidSpec(format!(
            "split proportion must lie in (0, 1), got {proportion}"
        )));
    }
    let n = data.len();
    // the epsilon absorbs representation error such as 0.8 * 5 = 3.9999...
    let n_train = (proportion * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(FloodError::InvalidSpec(format!(
            "proportion {proportion} leaves an empty split for n={n}"
        )));
    }
    let perm = sample(rng, n, n).into_vec();
    let (a, b) = perm.split_at(n_train);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((data.subset(&a), data.subset(&b)))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// MNIST-class corpora have ten digit classes.
pub const IDX_CLASSES: usize = 10;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FloodError::Length {
            path: path.into(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FloodError::io(path, e))
}

/// Parses an IDX image file; returns `(count, rows * cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FloodError::Format {
            path: path.into(),
            msg: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let d = rows * cols;
    let expected = 16 + n * d;
    if bytes.len() < expected {
        return Err(FloodError::Length {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((n, d, bytes[16..expected].to_vec()))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FloodError::Format {
            path: path.into(),
            msg: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(FloodError::Length {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`; digit
/// labels `0..=9` become classes `1..=10`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (n, d, pixels) = parse_idx_images(&read_bytes(images_path)?, images_path)?;
    let raw_labels = parse_idx_labels(&read_bytes(labels_path)?, labels_path)?;
    if raw_labels.len() != n {
        return Err(FloodError::Consistency(format!(
            "{} has {n} images but {} has {} labels",
            images_path.display(),
            labels_path.display(),
            raw_labels.len()
        )));
    }
    if let Some(&bad) = raw_labels.iter().find(|&&l| l as usize >= IDX_CLASSES) {
        return Err(FloodError::Consistency(format!(
            "{}: label {bad} outside 0..=9",
            labels_path.display()
        )));
    }
    let features = Array2::from_shape_vec((n, d), pixels.iter().map(|&p| f64::from(p) / 255.0).collect())
        .map_err(|e| FloodError::Shape(e.to_string()))?;
    let labels = raw_labels.iter().map(|&l| i32::from(l) + 1).collect();
    LabeledDataset::new(features, labels, LabelSpace::MultiClass(IDX_CLASSES))
}
