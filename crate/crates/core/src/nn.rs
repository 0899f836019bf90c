//! Dense feedforward networks: ReLU on hidden layers, identity on the output.
//!
//! Scores are laid out `batch x K`. Binary tasks use a single output unit
//! (`K = 1`) whose sign gives the prediction.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};

/// Rows evaluated at once by [`predict_scores`]; bounds activation memory on
/// large evaluation splits.
pub const EVAL_CHUNK: usize = 2048;

/// One affine layer. `weights` is `out_units x in_units`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(out_units: usize, in_units: usize) -> Self {
        DenseLayer {
            weights: Array2::zeros((out_units, in_units)),
            bias: Array1::zeros(out_units),
        }
    }

    pub fn in_units(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_units(&self) -> usize {
        self.weights.nrows()
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Ordered dense layers of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DenseLayer>", into = "Vec<DenseLayer>")]
pub struct ModelParams {
    layers: Vec<DenseLayer>,
}

impl TryFrom<Vec<DenseLayer>> for ModelParams {
    type Error = FloodError;

    fn try_from(layers: Vec<DenseLayer>) -> Result<Self> {
        ModelParams::new(layers)
    }
}

impl From<ModelParams> for Vec<DenseLayer> {
    fn from(p: ModelParams) -> Self {
        p.layers
    }
}

impl ModelParams {
    /// Validates the layer chain and finiteness.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(FloodError::InvalidArchitecture("no layers".into()));
        }
        for (t, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_units() {
                return Err(FloodError::InvalidArchitecture(format!(
                    "layer {t}: bias has {} entries for {} units",
                    layer.bias.len(),
                    layer.out_units()
                )));
            }
            if layer.in_units() == 0 || layer.out_units() == 0 {
                return Err(FloodError::InvalidArchitecture(format!(
                    "layer {t} has a zero dimension"
                )));
            }
        }
        for (t, pair) in layers.windows(2).enumerate() {
            if pair[0].out_units() != pair[1].in_units() {
                return Err(FloodError::InvalidArchitecture(format!(
                    "layer {} outputs {} units but layer {} expects {}",
                    t,
                    pair[0].out_units(),
                    t + 1,
                    pair[1].in_units()
                )));
            }
        }
        let params = ModelParams { layers };
        if !params.is_finite() {
            return Err(FloodError::Numeric("non-finite parameter".into()));
        }
        Ok(params)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    /// `[in, hidden..., out]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_units())
            .chain(self.layers.iter().map(DenseLayer::out_units))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_units()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_units()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// All parameters, layer by layer: row-major weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    /// Inverse of [`ModelParams::to_flat`] for a given architecture.
    pub fn from_flat(layer_sizes: &[usize], values: &[f64]) -> Result<Self> {
        ModelParams::new(unflatten(layer_sizes, values)?)
    }

    /// `self + scale * direction`, where `direction` has the same shape.
    pub fn perturbed(&self, direction: &Gradients, scale: f64) -> Result<Self> {
        direction.check_congruent(self)?;
        let mut out = self.clone();
        for (l, d) in out.layers.iter_mut().zip(direction.layers()) {
            l.weights.scaled_add(scale, &d.weights);
            l.bias.scaled_add(scale, &d.bias);
        }
        Ok(out)
    }
}

/// Gradient (or any parameter-shaped direction) for a [`ModelParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    layers: Vec<DenseLayer>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            layers: params
                .layers()
                .iter()
                .map(|l| DenseLayer::zeros(l.out_units(), l.in_units()))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Self {
        Gradients { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn from_flat(layer_sizes: &[usize], values: &[f64]) -> Result<Self> {
        Ok(Gradients {
            layers: unflatten(layer_sizes, values)?,
        })
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn is_congruent(&self, params: &ModelParams) -> bool {
        self.layers.len() == params.layers().len()
            && self
                .layers
                .iter()
                .zip(params.layers())
                .all(|(g, p)| g.weights.dim() == p.weights.dim() && g.bias.dim() == p.bias.dim())
    }

    pub fn check_congruent(&self, params: &ModelParams) -> Result<()> {
        if self.is_congruent(params) {
            Ok(())
        } else {
            Err(FloodError::Shape(
                "gradient tree does not match the parameter tree".into(),
            ))
        }
    }
}

fn flatten(layers: &[DenseLayer]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(DenseLayer::num_params).sum());
    for l in layers {
        out.extend(l.weights.iter().copied());
        out.extend(l.bias.iter().copied());
    }
    out
}

fn unflatten(layer_sizes: &[usize], values: &[f64]) -> Result<Vec<DenseLayer>> {
    validate_sizes(layer_sizes)?;
    let expected: usize = layer_sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
    if values.len() != expected {
        return Err(FloodError::Shape(format!(
            "expected {expected} values for layer sizes {layer_sizes:?}, got {}",
            values.len()
        )));
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let nw = fan_in * fan_out;
        let weights = Array2::from_shape_vec((fan_out, fan_in), values[offset..offset + nw].to_vec())
            .map_err(|e| FloodError::Shape(e.to_string()))?;
        offset += nw;
        let bias = Array1::from(values[offset..offset + fan_out].to_vec());
        offset += fan_out;
        layers.push(DenseLayer { weights, bias });
    }
    Ok(layers)
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(FloodError::InvalidArchitecture(format!(
            "need at least an input and an output size, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(FloodError::InvalidArchitecture(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

/// He initialization: weights `N(0, 2 / in_units)`, zero biases.
pub fn init_mlp(layer_sizes: &[usize], seed: u64) -> Result<ModelParams> {
    validate_sizes(layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| FloodError::InvalidArchitecture(e.to_string()))?;
        let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut rng));
        layers.push(DenseLayer {
            weights,
            bias: Array1::zeros(fan_out),
        });
    }
    ModelParams::new(layers)
}

/// Activations recorded by [`forward`] for use by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `inputs[t]` is the input fed to layer `t`; `inputs[0]` is the batch.
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activations of every layer.
    pub pre_activations: Vec<Array2<f64>>,
    /// Output-layer pre-activations, `batch x K`.
    pub scores: Array2<f64>,
}

impl ForwardTrace {
    /// Post-activation of hidden layer `t` (the input of layer `t + 1`).
    pub fn post_activation(&self, t: usize) -> &Array2<f64> {
        &self.inputs[t + 1]
    }

    pub fn batch_size(&self) -> usize {
        self.scores.nrows()
    }
}

fn check_input(params: &ModelParams, inputs: &ArrayView2<f64>) -> Result<()> {
    if inputs.ncols() != params.input_dim() {
        return Err(FloodError::Shape(format!(
            "input width {} but the network expects {}",
            inputs.ncols(),
            params.input_dim()
        )));
    }
    Ok(())
}

fn affine(layer: &DenseLayer, input: &ArrayView2<f64>) -> Array2<f64> {
    let mut z = input.dot(&layer.weights.t());
    z += &layer.bias;
    z
}

/// Full forward pass keeping every intermediate needed for backpropagation.
pub fn forward(params: &ModelParams, inputs: ArrayView2<f64>) -> Result<ForwardTrace> {
    check_input(params, &inputs)?;
    let depth = params.layers().len();
    let mut layer_inputs = Vec::with_capacity(depth);
    let mut pre_activations = Vec::with_capacity(depth);
    let mut current = inputs.to_owned();
    for (t, layer) in params.layers().iter().enumerate() {
        let z = affine(layer, &current.view());
        layer_inputs.push(current);
        if t + 1 < depth {
            current = z.mapv(relu);
            pre_activations.push(z);
        } else {
            pre_activations.push(z.clone());
            current = z;
        }
    }
    Ok(ForwardTrace {
        inputs: layer_inputs,
        pre_activations,
        scores: current,
    })
}

/// Scores only, evaluated in chunks of [`EVAL_CHUNK`] rows.
pub fn predict_scores(params: &ModelParams, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(params, &inputs)?;
    let mut out = Array2::zeros((inputs.nrows(), params.output_dim()));
    for (chunk, mut dst) in inputs
        .axis_chunks_iter(Axis(0), EVAL_CHUNK)
        .zip(out.axis_chunks_iter_mut(Axis(0), EVAL_CHUNK))
    {
        let mut current = affine(&params.layers()[0], &chunk);
        for layer in &params.layers()[1..] {
            current.mapv_inplace(relu);
            current = affine(layer, &current.view());
        }
        dst.assign(&current);
    }
    Ok(out)
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Reverse-mode gradient.
///
/// `score_grad` is the derivative of the objective with respect to each score
/// (for a mean-over-batch risk it already carries the `1 / batch` factor).
/// The ReLU subgradient at exactly zero is zero.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    score_grad: ArrayView2<f64>,
) -> Result<Gradients> {
    if score_grad.dim() != trace.scores.dim() {
        return Err(FloodError::Shape(format!(
            "score gradient is {:?} but scores are {:?}",
            score_grad.dim(),
            trace.scores.dim()
        )));
    }
    let depth = params.layers().len();
    if trace.inputs.len() != depth || trace.pre_activations.len() != depth {
        return Err(FloodError::Shape(
            "trace depth does not match the network".into(),
        ));
    }
    let mut grads = Vec::with_capacity(depth);
    let mut delta = score_grad.to_owned();
    for t in (0..depth).rev() {
        let layer = &params.layers()[t];
        let input = &trace.inputs[t];
        if input.ncols() != layer.in_units() || delta.ncols() != layer.out_units() {
            return Err(FloodError::Shape(format!(
                "trace layer {t} does not match the network"
            )));
        }
        let weights = delta.t().dot(input);
        let bias = delta.sum_axis(Axis(0));
        grads.push(DenseLayer { weights, bias });
        if t > 0 {
            let mut upstream = delta.dot(&layer.weights);
            Zip::from(&mut upstream)
                .and(&trace.pre_activations[t - 1])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            delta = upstream;
        }
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// Central finite differences of `objective` at `params`; a test oracle.
pub fn finite_diff_grad<F>(params: &ModelParams, objective: F, epsilon: f64) -> Result<Gradients>
where
    F: Fn(&ModelParams) -> f64,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(FloodError::Numeric(format!("epsilon must be positive, got {epsilon}")));
    }
    let sizes = params.layer_sizes();
    let base = params.to_flat();
    let mut probe = base.clone();
    let mut out = vec![0.0; base.len()];
    for i in 0..base.len() {
        probe[i] = base[i] + epsilon;
        let plus = objective(&ModelParams::from_flat(&sizes, &probe)?);
        probe[i] = base[i] - epsilon;
        let minus = objective(&ModelParams::from_flat(&sizes, &probe)?);
        probe[i] = base[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(FloodError::Numeric(format!(
                "objective is not finite around parameter {i}"
            )));
        }
        out[i] = (plus - minus) / (2.0 * epsilon);
    }
    Gradients::from_flat(&sizes, &out)
}

const CHECKPOINT_FORMAT: &str = "floodlab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk form of [`ModelParams`]: a layer-size header plus row-major values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    /// Per layer: row-major weights followed by the bias.
    pub values: Vec<f64>,
}

impl From<&ModelParams> for Checkpoint {
    fn from(p: &ModelParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_sizes: p.layer_sizes(),
            values: p.to_flat(),
        }
    }
}

impl Checkpoint {
    pub fn into_params(self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(FloodError::Serde(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        ModelParams::from_flat(&self.layer_sizes, &self.values)
    }
}
