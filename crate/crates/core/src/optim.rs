//! Parameter updates: SGD with momentum, Adam, coupled weight decay and a
//! step-wise learning-rate schedule.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};
use crate::nn::{DenseLayer, Gradients, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// Multiply the learning rate by `factor` once for each milestone reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    /// Zero-based epoch indices at which a decay takes effect.
    pub epochs: Vec<usize>,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// L2 coefficient added to weight gradients (biases are not decayed).
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_decay: Option<LrDecay>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            lr_decay: None,
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            momentum,
            ..OptimizerConfig::adam(learning_rate)
        }
    }

    pub fn with_weight_decay(mut self, rate: f64) -> Self {
        self.weight_decay = rate;
        self
    }

    pub fn with_lr_decay(mut self, epochs: Vec<usize>, factor: f64) -> Self {
        self.lr_decay = Some(LrDecay { epochs, factor });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FloodError::InvalidSpec(msg));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam betas must lie in [0, 1), got {} / {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(d) = &self.lr_decay {
            if !(d.factor > 0.0) || !d.factor.is_finite() {
                return bad(format!("decay factor must be positive, got {}", d.factor));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during the zero-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self.learning_rate, epoch, self.lr_decay.as_ref())
    }
}

/// `base_lr * factor^k` where `k` counts the milestones `<= epoch`.
pub fn lr_at_epoch(base_lr: f64, epoch: usize, lr_decay: Option<&LrDecay>) -> f64 {
    match lr_decay {
        None => base_lr,
        Some(d) => {
            let passed = d.epochs.iter().filter(|&&m| epoch >= m).count();
            base_lr * d.factor.powi(passed as i32)
        }
    }
}

/// Per-parameter slots for one training run.
#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Sgd { velocity: Gradients },
    Adam { m: Gradients, v: Gradients, step: u64 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::SgdMomentum => OptimizerState::Sgd {
                velocity: Gradients::zeros_like(params),
            },
            OptimizerKind::Adam => OptimizerState::Adam {
                m: Gradients::zeros_like(params),
                v: Gradients::zeros_like(params),
                step: 0,
            },
        }
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        match self {
            OptimizerState::Sgd { velocity } => velocity.check_congruent(params),
            OptimizerState::Adam { m, v, .. } => {
                m.check_congruent(params)?;
                v.check_congruent(params)
            }
        }
    }
}

/// Applies one update of the configured optimizer at learning rate `lr`.
pub fn step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    match state {
        OptimizerState::Sgd { velocity } => sgd_momentum_step(params, grads, velocity, config, lr),
        OptimizerState::Adam { m, v, step } => adam_step(params, grads, m, v, step, config, lr),
    }
}

fn check_shapes(params: &ModelParams, grads: &Gradients, state: &OptimizerState) -> Result<()> {
    grads.check_congruent(params)?;
    state.check(params)
}

/// `v' = momentum * v + g`, `theta' = theta - lr * v'`, where `g` includes
/// `weight_decay * theta` on weights.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &Gradients,
    velocity: &mut Gradients,
    config: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    grads.check_congruent(params)?;
    velocity.check_congruent(params)?;
    let mu = config.momentum;
    let wd = config.weight_decay;
    for ((p, g), v) in params
        .layers_mut()
        .iter_mut()
        .zip(grads.layers())
        .zip(velocity.layers_mut())
    {
        Zip::from(&mut p.weights)
            .and(&g.weights)
            .and(&mut v.weights)
            .for_each(|theta, &grad, vel| {
                *vel = mu * *vel + grad + wd * *theta;
                *theta -= lr * *vel;
            });
        Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut v.bias)
            .for_each(|theta, &grad, vel| {
                *vel = mu * *vel + grad;
                *theta -= lr * *vel;
            });
    }
    Ok(())
}

/// Bias-corrected Adam with coupled weight decay on weights.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    m: &mut Gradients,
    v: &mut Gradients,
    step: &mut u64,
    config: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    grads.check_congruent(params)?;
    m.check_congruent(params)?;
    v.check_congruent(params)?;
    *step += 1;
    let (b1, b2, eps, wd) = (config.beta1, config.beta2, config.eps, config.weight_decay);
    let c1 = 1.0 - b1.powi(*step as i32);
    let c2 = 1.0 - b2.powi(*step as i32);
    let update = |theta: &mut f64, grad: f64, mom: &mut f64, sq: &mut f64| {
        *mom = b1 * *mom + (1.0 - b1) * grad;
        *sq = b2 * *sq + (1.0 - b2) * grad * grad;
        let m_hat = *mom / c1;
        let v_hat = *sq / c2;
        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    let layers = params
        .layers_mut()
        .iter_mut()
        .zip(grads.layers())
        .zip(m.layers_mut().iter_mut().zip(v.layers_mut()));
    for ((p, g), (mm, vv)) in layers {
        let DenseLayer { weights, bias } = p;
        Zip::from(weights)
            .and(&g.weights)
            .and(&mut mm.weights)
            .and(&mut vv.weights)
            .for_each(|theta, &grad, mom, sq| {
                let grad = grad + wd * *theta;
                update(theta, grad, mom, sq)
            });
        Zip::from(bias)
            .and(&g.bias)
            .and(&mut mm.bias)
            .and(&mut vv.bias)
            .for_each(|theta, &grad, mom, sq| update(theta, grad, mom, sq));
    }
    Ok(())
}

/// An optimizer configuration bundled with its state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::new(config.kind, params);
        Ok(Optimizer { config, state })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
        check_shapes(params, grads, &self.state)?;
        step(params, grads, &mut self.state, &self.config, lr)?;
        if !params.is_finite() {
            return Err(FloodError::Numeric("optimizer produced a non-finite parameter".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(theta: f64) -> ModelParams {
        ModelParams::new(vec![DenseLayer {
            weights: array![[theta]],
            bias: array![0.0],
        }])
        .unwrap()
    }

    fn grad(g: f64) -> Gradients {
        Gradients::from_layers(vec![DenseLayer {
            weights: array![[g]],
            bias: array![0.0],
        }])
    }

    fn weight(p: &ModelParams) -> f64 {
        p.layers()[0].weights[[0, 0]]
    }

    #[test]
    fn vanilla_sgd_step() {
        let mut p = scalar(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0), &p).unwrap();
        opt.step(&mut p, &grad(1.0), 0.1).unwrap();
        assert_eq!(weight(&p), -0.1);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        for cfg in [OptimizerConfig::sgd(0.1, 0.9), OptimizerConfig::adam(0.001)] {
            let mut p = crate::nn::init_mlp(&[3, 4, 2], 1).unwrap();
            let before = p.clone();
            let mut opt = Optimizer::new(cfg.clone(), &p).unwrap();
            let g = Gradients::zeros_like(&p);
            opt.step(&mut p, &g, cfg.learning_rate).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn momentum_unrolled_by_hand() {
        let mut p = scalar(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(1.0, 0.9), &p).unwrap();
        opt.step(&mut p, &grad(1.0), 1.0).unwrap();
        assert_eq!(weight(&p), -1.0);
        opt.step(&mut p, &grad(1.0), 1.0).unwrap();
        assert!((weight(&p) + 2.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut p = ModelParams::new(vec![DenseLayer {
            weights: array![[2.0]],
            bias: array![3.0],
        }])
        .unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5, 0.0).with_weight_decay(0.1), &p).unwrap();
        let zero = Gradients::zeros_like(&p);
        opt.step(&mut p, &zero, 0.5).unwrap();
        assert!((p.layers()[0].weights[[0, 0]] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
        assert_eq!(p.layers()[0].bias[0], 3.0);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = ModelParams::new(vec![DenseLayer {
            weights: array![[1.0, -1.0, 0.5]],
            bias: array![0.0],
        }])
        .unwrap();
        let g = Gradients::from_layers(vec![DenseLayer {
            weights: array![[3.0, -0.02, 1e3]],
            bias: array![-4.0],
        }]);
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.001), &p).unwrap();
        opt.step(&mut p, &g, 0.001).unwrap();
        let moved: Vec<f64> = p.to_flat().iter().zip(before.to_flat()).map(|(a, b)| a - b).collect();
        for (d, gi) in moved.iter().zip(g.to_flat()) {
            assert!((d.abs() - 0.001).abs() < 1e-6 * 0.001 / gi.abs().min(1.0), "{d} for {gi}");
            assert_eq!(d.signum(), -gi.signum());
        }
    }

    #[test]
    fn adam_scale_invariant_on_first_step() {
        let base = crate::nn::init_mlp(&[3, 4, 1], 3).unwrap();
        let mut g = Gradients::zeros_like(&base);
        for (k, l) in g.layers_mut().iter_mut().enumerate() {
            l.weights.mapv_inplace(|_| 0.1 * (k as f64 + 1.0));
            l.bias.fill(-0.3);
        }
        let mut doubled = g.clone();
        doubled.scale(2.0);
        let run = |grads: &Gradients| {
            let mut p = base.clone();
            let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), &p).unwrap();
            opt.step(&mut p, grads, 0.01).unwrap();
            p.to_flat()
        };
        let (a, b) = (run(&g), run(&doubled));
        let start = base.to_flat();
        for ((x, y), s) in a.iter().zip(&b).zip(&start) {
            let (da, db) = (x - s, y - s);
            assert!((da - db).abs() <= 1e-6 * da.abs());
        }
    }

    #[test]
    fn schedule() {
        let d = LrDecay {
            epochs: vec![250, 400],
            factor: 0.1,
        };
        assert_eq!(lr_at_epoch(0.1, 300, None), 0.1);
        assert!((lr_at_epoch(0.1, 249, Some(&d)) - 0.1).abs() < 1e-18);
        assert!((lr_at_epoch(0.1, 300, Some(&d)) - 0.01).abs() < 1e-15);
        assert!((lr_at_epoch(0.1, 450, Some(&d)) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &p).unwrap();
        let other = Gradients::zeros_like(&crate::nn::init_mlp(&[2, 1], 0).unwrap());
        assert!(matches!(opt.step(&mut p, &other, 0.1), Err(FloodError::Shape(_))));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::adam(0.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 1.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 0.9).with_weight_decay(-1.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 0.9).with_lr_decay(vec![1], 0.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 0.9).with_weight_decay(1e-5).validate().is_ok());
    }
}
