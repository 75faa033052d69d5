use crate::executor::ArtificialLoad;
use crate::network::{task_loss, LayerModule, NetworkError, ParamGrads, Task};
use crate::optimizer::ModuleOptimizer;
use crate::tensor::{self, Scalar};

use super::{Activation, Episode, LossEvent, ModuleUpdate, PseudoGrad, Result, StepRecord};

/// Running masked sum `Σ_t γ_i^t ∇̃^t_{θ_i}` and count `γ_i` for one module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleAccumulator<T> {
    sum: Option<ParamGrads<T>>,
    gamma: usize,
    mask: Vec<bool>,
}

impl<T> Default for ModuleAccumulator<T> {
    fn default() -> Self {
        Self {
            sum: None,
            gamma: 0,
            mask: Vec::new(),
        }
    }
}

impl<T: Scalar> ModuleAccumulator<T> {
    pub fn gamma(&self) -> usize {
        self.gamma
    }

    /// `γ_i^t` for steps `1..=t` so far.
    pub fn mask_history(&self) -> &[bool] {
        &self.mask
    }

    pub fn sum(&self) -> Option<&ParamGrads<T>> {
        self.sum.as_ref()
    }

    fn push(&mut self, grads: Option<&ParamGrads<T>>) {
        self.mask.push(grads.is_some());
        let Some(grads) = grads else { return };
        self.gamma += 1;
        match &mut self.sum {
            None => self.sum = Some(grads.clone()),
            Some(sum) => {
                for (s, g) in sum.iter_mut().zip(grads) {
                    s.add_assign(g).expect("gradient shapes are fixed per module");
                }
            }
        }
    }

    /// `(1/γ_i) Σ_t γ_i^t ∇̃^t_{θ_i}`, or [`ModuleUpdate::NoUpdate`] when `γ_i = 0`.
    pub fn average(&self) -> ModuleUpdate<T> {
        match &self.sum {
            Some(sum) if self.gamma > 0 => {
                let n = T::from_f64(self.gamma as f64);
                ModuleUpdate::Average(sum.iter().map(|t| t.map(|v| v / n)).collect())
            }
            _ => ModuleUpdate::NoUpdate,
        }
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

/// Read-only inputs shared by every module on a step.
#[derive(Clone, Copy)]
pub struct LaneContext<'a, T> {
    pub step: usize,
    pub depth: usize,
    pub task: Task,
    pub episode: &'a Episode<T>,
    pub load: Option<ArtificialLoad>,
    /// Keep the top module's output in [`LaneOutput::top_output`].
    pub keep_outputs: bool,
    /// Learning rate for immediate per-step updates, when an optimizer is attached.
    pub lr: f64,
}

/// What a module receives at the start of a step: the activation emitted by
/// its predecessor and the pseudo-gradient emitted by its successor on the
/// previous step.
#[derive(Debug, Clone, Default)]
pub struct LaneInput<T> {
    pub forward: Option<Activation<T>>,
    pub upstream: Option<PseudoGrad<T>>,
}

#[derive(Debug, Clone)]
pub struct LaneOutput<T> {
    pub forward: Option<Activation<T>>,
    pub downstream: Option<PseudoGrad<T>>,
    pub record: StepRecord,
    pub loss: Option<LossEvent>,
    /// This step's parameter pseudo-gradient, if the mask was set.
    pub step_grads: Option<ParamGrads<T>>,
    pub top_output: Option<Activation<T>>,
}

/// One module's work for one computation step.
///
/// Forward first (the input becomes the cached activation), then the loss if
/// this is the top module, then the backward pass against the cache. A module
/// with no pending pseudo-gradient does no backward work and records `γ = 0`.
/// If an optimizer is attached, the step's pseudo-gradient is applied at the
/// end of the step, so forward and backward within the step see the same θ.
pub fn lane_step<T: Scalar>(
    module: &mut LayerModule<T>,
    acc: &mut ModuleAccumulator<T>,
    optimizer: Option<&mut ModuleOptimizer<T>>,
    ctx: &LaneContext<'_, T>,
    input: LaneInput<T>,
) -> Result<LaneOutput<T>> {
    let index = module.index();
    let is_top = index == ctx.depth;
    let mut record = StepRecord {
        step: ctx.step,
        module: index,
        fwd_origin: None,
        bwd_origin: None,
        masked: true,
    };

    let mut emitted = None;
    if let Some(act) = input.forward {
        if let Some(load) = ctx.load {
            load.run();
        }
        let value = module.forward(act.value, act.origin)?;
        record.fwd_origin = Some(act.origin);
        emitted = Some(Activation {
            origin: act.origin,
            value,
        });
    }

    let mut loss = None;
    let upstream = if is_top {
        match &emitted {
            Some(out) => {
                let (value, grad) = task_loss(ctx.task, &out.value, ctx.episode.target(out.origin))?;
                loss = Some(LossEvent {
                    step: ctx.step,
                    origin: out.origin,
                    loss: value.as_f64(),
                    probabilities: match ctx.task {
                        Task::Classification { .. } => tensor::softmax(&out.value)
                            .data()
                            .iter()
                            .map(|p| p.as_f64())
                            .collect(),
                        Task::Autoencoding => Vec::new(),
                    },
                });
                Some(PseudoGrad {
                    origin: out.origin,
                    value: grad,
                })
            }
            None => None,
        }
    } else {
        input.upstream
    };

    let mut downstream = None;
    let mut step_grads = None;
    if let Some(g) = upstream {
        if let Some(load) = ctx.load {
            load.run();
        }
        let (grads, gx) = module
            .backward_with(&g.value, index > 1)
            .map_err(|source| match source {
                NetworkError::GradientWithoutActivation { .. } => super::PipelineError::Invariant {
                    step: ctx.step,
                    source,
                    trace: format!("{record:?}"),
                },
                other => other.into(),
            })?;
        record.bwd_origin = Some(g.origin);
        record.masked = false;
        downstream = gx.map(|value| PseudoGrad {
            origin: g.origin,
            value,
        });
        acc.push(Some(&grads));
        step_grads = Some(grads);
    } else {
        acc.push(None);
    }

    if let (Some(opt), Some(grads)) = (optimizer, step_grads.as_ref()) {
        opt.apply(index, module.params_mut(), grads, ctx.lr)?;
    }

    let (forward, top_output) = if is_top {
        (None, emitted.filter(|_| ctx.keep_outputs))
    } else {
        (emitted, None)
    };
    Ok(LaneOutput {
        forward,
        downstream,
        record,
        loss,
        step_grads,
        top_output,
    })
}
