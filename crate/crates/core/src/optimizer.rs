//! Parameter update rules, value clipping, decoupled weight decay and the
//! warm-up / step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkSpec;
use crate::pipeline::ModuleUpdate;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("module {module}: non-finite gradient")]
    NonFinite { module: usize },
    #[error("module {module}: {expected} parameter tensors but {actual} gradients")]
    Arity {
        module: usize,
        expected: usize,
        actual: usize,
    },
    #[error("expected updates for {expected} modules, got {actual}")]
    ModuleCount { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Rule {
    pub const MOMENTUM: Rule = Rule::Momentum { beta: 0.9 };
    pub const ADAM: Rule = Rule::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// Linear warm-up to the base rate, then division by `decay_factor` at each
/// epoch listed in `decay_epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub iterations_per_epoch: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 5,
            decay_epochs: vec![100, 200],
            decay_factor: 10.0,
            iterations_per_epoch: 100,
        }
    }
}

impl LrSchedule {
    pub fn constant() -> Self {
        Self {
            warmup_epochs: 0,
            decay_epochs: Vec::new(),
            decay_factor: 1.0,
            iterations_per_epoch: 1,
        }
    }
}

/// Learning rate at `iteration` (counted within `epoch`).
pub fn lr_at(schedule: &LrSchedule, base_lr: f64, epoch: usize, iteration: usize) -> f64 {
    if epoch < schedule.warmup_epochs {
        let per_epoch = schedule.iterations_per_epoch.max(1) as f64;
        let progress = (epoch as f64 * per_epoch + iteration as f64)
            / (schedule.warmup_epochs as f64 * per_epoch);
        return base_lr * progress.min(1.0);
    }
    let drops = schedule.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    base_lr / schedule.decay_factor.powi(drops as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawOptimizerConfig", into = "RawOptimizerConfig")]
pub struct OptimizerConfig {
    pub rule: Rule,
    pub lr: f64,
    /// Clip every gradient component to `[-clip_value, clip_value]`.
    pub clip_value: Option<f64>,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rule: Rule::ADAM,
            lr: 1e-4,
            clip_value: Some(1.0),
            weight_decay: 0.0,
            schedule: LrSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RuleKind {
    Sgd,
    Momentum,
    #[default]
    Adam,
}

/// Flat on-disk form: `rule = "adam"` next to the hyper-parameters of every rule.
#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawOptimizerConfig {
    rule: RuleKind,
    lr: f64,
    clip_value: Option<f64>,
    weight_decay: f64,
    beta: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    schedule: LrSchedule,
}

impl Default for RawOptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::default().into()
    }
}

impl From<OptimizerConfig> for RawOptimizerConfig {
    fn from(c: OptimizerConfig) -> Self {
        let (mut beta, mut beta1, mut beta2, mut eps) = (0.9, 0.9, 0.999, 1e-8);
        let rule = match c.rule {
            Rule::Sgd => RuleKind::Sgd,
            Rule::Momentum { beta: b } => {
                beta = b;
                RuleKind::Momentum
            }
            Rule::Adam {
                beta1: b1,
                beta2: b2,
                eps: e,
            } => {
                (beta1, beta2, eps) = (b1, b2, e);
                RuleKind::Adam
            }
        };
        Self {
            rule,
            lr: c.lr,
            clip_value: c.clip_value,
            weight_decay: c.weight_decay,
            beta,
            beta1,
            beta2,
            eps,
            schedule: c.schedule,
        }
    }
}

impl From<RawOptimizerConfig> for OptimizerConfig {
    fn from(r: RawOptimizerConfig) -> Self {
        let rule = match r.rule {
            RuleKind::Sgd => Rule::Sgd,
            RuleKind::Momentum => Rule::Momentum { beta: r.beta },
            RuleKind::Adam => Rule::Adam {
                beta1: r.beta1,
                beta2: r.beta2,
                eps: r.eps,
            },
        };
        Self {
            rule,
            lr: r.lr,
            clip_value: r.clip_value,
            weight_decay: r.weight_decay,
            schedule: r.schedule,
        }
    }
}

/// Weight decay and initial learning rates searched over, for both modes.
pub const SWEEP_WEIGHT_DECAY: [f64; 4] = [0.0, 1e-4, 1e-3, 1e-2];
pub const SWEEP_LEARNING_RATE: [f64; 2] = [1e-4, 1e-5];

pub fn clip_by_value<T: Scalar>(g: T, limit: f64) -> T {
    let limit = T::from_f64(limit);
    g.max(-limit).min(limit)
}

/// Update state for the parameters of one module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleOptimizer<T> {
    rule: Rule,
    clip_value: Option<f64>,
    weight_decay: f64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> ModuleOptimizer<T> {
    pub fn new(config: &OptimizerConfig, params: &[Tensor<T>]) -> Self {
        let zeros = |on: bool| -> Vec<Tensor<T>> {
            if on {
                params.iter().map(|p| Tensor::zeros(p.shape())).collect()
            } else {
                Vec::new()
            }
        };
        Self {
            rule: config.rule,
            clip_value: config.clip_value,
            weight_decay: config.weight_decay,
            first: zeros(!matches!(config.rule, Rule::Sgd)),
            second: zeros(matches!(config.rule, Rule::Adam { .. })),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to `params` in place.
    pub fn apply(
        &mut self,
        module: usize,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<(), OptimizerError> {
        if params.len() != grads.len() {
            return Err(OptimizerError::Arity {
                module,
                expected: params.len(),
                actual: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(OptimizerError::NonFinite { module });
        }
        self.steps += 1;
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * self.weight_decay);
        let (bias1, bias2) = match self.rule {
            Rule::Adam { beta1, beta2, .. } => (
                1.0 - beta1.powi(self.steps as i32),
                1.0 - beta2.powi(self.steps as i32),
            ),
            _ => (1.0, 1.0),
        };
        for (p, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (theta, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = match self.clip_value {
                    Some(c) => clip_by_value(g, c),
                    None => g,
                };
                let step = match self.rule {
                    Rule::Sgd => g,
                    Rule::Momentum { beta } => {
                        let m = &mut self.first[p].data_mut()[j];
                        *m = T::from_f64(beta) * *m + g;
                        *m
                    }
                    Rule::Adam { beta1, beta2, eps } => {
                        let m = &mut self.first[p].data_mut()[j];
                        *m = T::from_f64(beta1) * *m + T::from_f64(1.0 - beta1) * g;
                        let m_hat = *m / T::from_f64(bias1);
                        let v = &mut self.second[p].data_mut()[j];
                        *v = T::from_f64(beta2) * *v + T::from_f64(1.0 - beta2) * g * g;
                        let v_hat = *v / T::from_f64(bias2);
                        m_hat / (v_hat.sqrt() + T::from_f64(eps))
                    }
                };
                *theta = *theta - lr_t * step - decay * *theta;
            }
        }
        Ok(())
    }
}

/// Optimizer state for a whole network, one [`ModuleOptimizer`] per module.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    modules: Vec<ModuleOptimizer<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, net: &NetworkSpec<T>) -> Self {
        let modules = net
            .modules
            .iter()
            .map(|m| ModuleOptimizer::new(&config, m.params()))
            .collect();
        Self { config, modules }
    }

    pub fn modules_mut(&mut self) -> &mut [ModuleOptimizer<T>] {
        &mut self.modules
    }

    pub fn lr_at(&self, epoch: usize, iteration: usize) -> f64 {
        lr_at(&self.config.schedule, self.config.lr, epoch, iteration)
    }

    /// Applies episode-averaged updates; `NoUpdate` modules are left untouched.
    pub fn apply_update(
        &mut self,
        net: &mut NetworkSpec<T>,
        updates: &[ModuleUpdate<T>],
        epoch: usize,
        iteration: usize,
    ) -> Result<(), OptimizerError> {
        if updates.len() != net.depth() {
            return Err(OptimizerError::ModuleCount {
                expected: net.depth(),
                actual: updates.len(),
            });
        }
        let lr = self.lr_at(epoch, iteration);
        for ((module, opt), update) in net.modules.iter_mut().zip(&mut self.modules).zip(updates) {
            if let ModuleUpdate::Average(grads) = update {
                let index = module.index();
                opt.apply(index, module.params_mut(), grads, lr)?;
            }
        }
        Ok(())
    }
}
