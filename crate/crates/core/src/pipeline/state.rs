use crate::executor::ArtificialLoad;
use crate::network::{NetworkSpec, ParamGrads};
use crate::optimizer::OptimizerState;
use crate::tensor::Scalar;

use super::{
    lane_step, Activation, Drain, Episode, FrameSource, LaneContext, LaneInput, ModuleAccumulator,
    ModuleUpdate, PipelineError, PseudoGrad, Result, StepRecord, StepTrace,
};

/// Slots and accumulators of a running pipeline.
///
/// `forward_slots[i]` holds what module `i+1` emitted on the previous step and
/// `backward_slots[i]` the pseudo-gradient module `i+1` sent down. A step
/// first takes every slot, then runs each module, then refills the slots, so
/// all modules within a step are independent of one another.
#[derive(Debug, Clone)]
pub struct PipelineState<T> {
    step: usize,
    depth: usize,
    source: FrameSource,
    pub(crate) forward_slots: Vec<Option<Activation<T>>>,
    pub(crate) backward_slots: Vec<Option<PseudoGrad<T>>>,
    pub(crate) accumulators: Vec<ModuleAccumulator<T>>,
    trace: StepTrace,
    outputs: Vec<Activation<T>>,
    pub keep_outputs: bool,
    pub load: Option<ArtificialLoad>,
}

/// Per-step result returned by [`PipelineState::step`].
#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub records: Vec<StepRecord>,
    /// `∇̃^t_{θ_i}` for each module, `None` where masked.
    pub step_grads: Vec<Option<ParamGrads<T>>>,
}

impl<T: Scalar> PipelineState<T> {
    pub fn new(depth: usize, source: FrameSource) -> Self {
        Self {
            step: 0,
            depth,
            source,
            forward_slots: vec![None; depth],
            backward_slots: vec![None; depth],
            accumulators: vec![ModuleAccumulator::default(); depth],
            trace: StepTrace::default(),
            outputs: Vec::new(),
            keep_outputs: false,
            load: None,
        }
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn source(&self) -> FrameSource {
        self.source
    }

    pub fn trace(&self) -> &StepTrace {
        &self.trace
    }

    pub fn into_trace(self) -> StepTrace {
        self.trace
    }

    pub fn accumulators(&self) -> &[ModuleAccumulator<T>] {
        &self.accumulators
    }

    /// Top-module outputs collected while `keep_outputs` was set.
    pub fn outputs(&self) -> &[Activation<T>] {
        &self.outputs
    }

    pub fn take_outputs(&mut self) -> Vec<Activation<T>> {
        std::mem::take(&mut self.outputs)
    }

    /// Takes the inputs every module consumes on the next step.
    pub(crate) fn take_inputs(&mut self, episode: &Episode<T>) -> Vec<LaneInput<T>> {
        let t = self.step + 1;
        let d = self.depth;
        (0..d)
            .map(|i| {
                let forward = if i == 0 {
                    self.source.frame_at(t, d, episode.len()).map(|f| Activation {
                        origin: f,
                        value: episode.frame(f).clone(),
                    })
                } else {
                    self.forward_slots[i - 1].take()
                };
                let upstream = if i + 1 < d {
                    self.backward_slots[i + 1].take()
                } else {
                    None
                };
                LaneInput { forward, upstream }
            })
            .collect()
    }

    pub(crate) fn begin_step(&mut self) -> usize {
        self.step += 1;
        self.step
    }

    /// Stores one module's step output into the slots and the trace.
    pub(crate) fn commit(&mut self, i: usize, out: super::LaneOutput<T>) -> Option<ParamGrads<T>> {
        self.forward_slots[i] = out.forward;
        self.backward_slots[i] = out.downstream;
        self.trace.records.push(out.record);
        if let Some(loss) = out.loss {
            self.trace.losses.push(loss);
        }
        if let Some(o) = out.top_output {
            self.outputs.push(o);
        }
        out.step_grads
    }

    /// Appends steps run elsewhere (the parallel engine) to this state.
    pub(crate) fn absorb(
        &mut self,
        last_step: usize,
        records: Vec<StepRecord>,
        losses: Vec<super::LossEvent>,
        outputs: Vec<Activation<T>>,
    ) {
        self.step = last_step;
        self.trace.records.extend(records);
        self.trace.losses.extend(losses);
        self.outputs.extend(outputs);
    }

    pub(crate) fn dump(&self) -> String {
        self.trace.to_jsonl()
    }

    /// Runs one computation step for every module in order.
    pub fn step(
        &mut self,
        net: &mut NetworkSpec<T>,
        episode: &Episode<T>,
        mut optimizer: Option<&mut OptimizerState<T>>,
        lr: f64,
    ) -> Result<StepOutcome<T>> {
        let inputs = self.take_inputs(episode);
        let t = self.begin_step();
        let ctx = LaneContext {
            step: t,
            depth: self.depth,
            task: net.task,
            episode,
            load: self.load,
            keep_outputs: self.keep_outputs,
            lr,
        };
        let mut outs = Vec::with_capacity(self.depth);
        for (i, input) in inputs.into_iter().enumerate() {
            let opt = optimizer.as_deref_mut().map(|o| &mut o.modules_mut()[i]);
            let r = lane_step(&mut net.modules[i], &mut self.accumulators[i], opt, &ctx, input);
            match r {
                Ok(out) => outs.push(out),
                Err(PipelineError::Invariant { step, source, trace }) => {
                    return Err(PipelineError::Invariant {
                        step,
                        source,
                        trace: format!("{}{trace}", self.dump()),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let mut records = Vec::with_capacity(self.depth);
        let mut step_grads = Vec::with_capacity(self.depth);
        for (i, out) in outs.into_iter().enumerate() {
            records.push(out.record);
            step_grads.push(self.commit(i, out));
        }
        Ok(StepOutcome {
            records,
            step_grads,
        })
    }

    /// Clears slots, accumulators, masks, trace and collected outputs.
    pub fn clear(&mut self) {
        let keep = self.keep_outputs;
        let load = self.load;
        *self = Self::new(self.depth, self.source);
        self.keep_outputs = keep;
        self.load = load;
    }
}

/// One Sideways computation step.
pub fn sideways_step<T: Scalar>(
    state: &mut PipelineState<T>,
    net: &mut NetworkSpec<T>,
    episode: &Episode<T>,
) -> Result<StepOutcome<T>> {
    state.step(net, episode, None, 0.0)
}

/// Masked per-module averages of the accumulated pseudo-gradients.
pub fn finish_episode<T: Scalar>(state: &PipelineState<T>) -> Vec<ModuleUpdate<T>> {
    state.accumulators.iter().map(ModuleAccumulator::average).collect()
}

/// Zeroes all activations and pseudo-gradients, including the modules' caches.
pub fn restart<T: Scalar>(state: &mut PipelineState<T>, net: &mut NetworkSpec<T>) {
    state.clear();
    net.clear_caches();
}

#[derive(Debug, Clone)]
pub struct EpisodeResult<T> {
    pub updates: Vec<ModuleUpdate<T>>,
    pub trace: StepTrace,
    pub gammas: Vec<usize>,
}

/// Runs a whole episode sequentially from a restarted pipeline.
pub fn run_schedule<T: Scalar>(
    net: &mut NetworkSpec<T>,
    episode: &Episode<T>,
    source: FrameSource,
    drain: Drain,
    load: Option<ArtificialLoad>,
) -> Result<EpisodeResult<T>> {
    let mut state = PipelineState::new(net.depth(), source);
    state.load = load;
    restart(&mut state, net);
    let total = source.total_steps(net.depth(), episode.len(), drain);
    for _ in 0..total {
        state.step(net, episode, None, 0.0)?;
    }
    Ok(EpisodeResult {
        updates: finish_episode(&state),
        gammas: state.accumulators.iter().map(|a| a.gamma()).collect(),
        trace: state.into_trace(),
    })
}

/// Sideways episode with the drain policy applied after the last frame.
pub fn sideways_episode<T: Scalar>(
    net: &mut NetworkSpec<T>,
    episode: &Episode<T>,
    drain: Drain,
) -> Result<EpisodeResult<T>> {
    run_schedule(net, episode, FrameSource::Streaming, drain, None)
}

/// Blocking backpropagation: each frame runs forward and backward through the
/// whole network before the next frame enters. Gradients are averaged over
/// the clip.
pub fn bp_episode<T: Scalar>(net: &mut NetworkSpec<T>, episode: &Episode<T>) -> Result<EpisodeResult<T>> {
    run_schedule(net, episode, FrameSource::Blocking, Drain::Full, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_simple_cnn, LossTarget};
    use crate::pipeline::{cycle_length, Targets};
    use crate::tensor::{relative_error, Tensor};
    use crate::verify::{finite_difference, random_tensor};

    fn clip(k: usize, shape: &[usize], seed: u64) -> Episode<f64> {
        let frames = (0..k).map(|i| random_tensor(shape, seed + i as u64)).collect();
        Episode::new(frames, Targets::Label(1)).unwrap()
    }

    fn constant_clip(k: usize, shape: &[usize], seed: u64) -> Episode<f64> {
        let f = random_tensor(shape, seed);
        Episode::new(vec![f; k], Targets::Label(0)).unwrap()
    }

    #[test]
    fn hand_unrolled_two_module_schedule() {
        let mut net = build_simple_cnn::<f64>(&[2], 2, [4, 4, 1], 1).unwrap();
        let ep = clip(3, &[4, 4, 1], 2);
        let r = sideways_episode(&mut net, &ep, Drain::Full).unwrap();
        let fwd = |t, i| r.trace.record(t, i).unwrap().fwd_origin;
        assert_eq!(fwd(1, 1), Some(1));
        assert_eq!(fwd(1, 2), None);
        assert_eq!(fwd(2, 1), Some(2));
        assert_eq!(fwd(2, 2), Some(1));
        assert_eq!(fwd(3, 1), Some(3));
        assert_eq!(fwd(3, 2), Some(2));
        assert_eq!(r.trace.losses[0].step, 2);
        assert_eq!(r.trace.losses[0].origin, 1);
        // 3 frames + 2 drain steps.
        assert_eq!(r.trace.steps(), 5);
        assert_eq!(r.gammas, vec![3, 3]);
    }

    #[test]
    fn restart_then_step_only_first_module_active() {
        let mut net = build_simple_cnn::<f64>(&[2, 2], 2, [4, 4, 1], 3).unwrap();
        let ep = clip(4, &[4, 4, 1], 4);
        let mut state = PipelineState::new(net.depth(), FrameSource::Streaming);
        for _ in 0..3 {
            sideways_step(&mut state, &mut net, &ep).unwrap();
        }
        assert!(state.accumulators()[2].gamma() > 0);
        restart(&mut state, &mut net);
        assert_eq!(state.accumulators()[2].gamma(), 0);
        assert!(state.trace().records.is_empty());
        let out = sideways_step(&mut state, &mut net, &ep).unwrap();
        let busy: Vec<bool> = out.records.iter().map(StepRecord::busy).collect();
        assert_eq!(busy, vec![true, false, false]);
        assert!(net.modules[1].cache().is_none());
    }

    #[test]
    fn restart_gives_reproducible_episodes() {
        let mut net = build_simple_cnn::<f64>(&[3, 3], 3, [6, 6, 2], 5).unwrap();
        let ep = clip(5, &[6, 6, 2], 6);
        let a = sideways_episode(&mut net, &ep, Drain::Full).unwrap();
        let b = sideways_episode(&mut net, &ep, Drain::Full).unwrap();
        assert_eq!(a.updates, b.updates);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn short_episode_without_drain_marks_no_update() {
        // D = 3, K = 2 < cycle length: module 1 would first receive a gradient
        // at step 2D - 1 = 5, which never happens.
        let mut net = build_simple_cnn::<f64>(&[2, 2], 2, [4, 4, 1], 7).unwrap();
        let ep = clip(2, &[4, 4, 1], 8);
        assert!(ep.len() < cycle_length(3));
        let r = sideways_episode(&mut net, &ep, Drain::None).unwrap();
        assert_eq!(r.gammas, vec![0, 0, 0]);
        assert!(r.updates.iter().all(ModuleUpdate::is_no_update));
        let ep = clip(4, &[4, 4, 1], 8);
        let r = sideways_episode(&mut net, &ep, Drain::None).unwrap();
        // module 3 from step 3, module 2 from step 4, module 1 never.
        assert_eq!(r.gammas, vec![0, 1, 2]);
        assert!(r.updates[0].is_no_update());
    }

    #[test]
    fn bp_trace_has_full_cycles() {
        let mut net = build_simple_cnn::<f64>(&[2, 2, 2, 2], 2, [8, 8, 1], 9).unwrap();
        let ep = clip(2, &[8, 8, 1], 10);
        let r = bp_episode(&mut net, &ep).unwrap();
        assert_eq!(r.trace.steps(), 2 * 9);
        for t in 1..=r.trace.steps() {
            let busy = r.trace.step_records(t).filter(|r| r.busy()).count();
            assert_eq!(busy, 1, "step {t}");
        }
        assert_eq!(r.gammas, vec![2; 5]);
    }

    #[test]
    fn bp_matches_finite_differences() {
        let mut net = build_simple_cnn::<f64>(&[2, 3], 3, [5, 5, 2], 11).unwrap();
        let ep = clip(1, &[5, 5, 2], 12);
        let r = bp_episode(&mut net, &ep).unwrap();
        for (i, update) in r.updates.iter().enumerate() {
            let grads = update.grads().unwrap();
            for (p, g) in grads.iter().enumerate() {
                let fd = finite_difference(&net.modules[i].params()[p], 1e-5, |w| {
                    let mut n = net.clone();
                    n.modules[i].params_mut()[p] = w.clone();
                    let y = n.predict(ep.frame(1)).unwrap();
                    n.loss(&y, LossTarget::Label(1)).unwrap().0
                });
                assert!(relative_error(g, &fd) <= 1e-5, "module {i} param {p}");
            }
        }
    }

    #[test]
    fn constant_clip_matches_bp() {
        let mut net = build_simple_cnn::<f64>(&[3, 3, 2], 2, [6, 6, 1], 13).unwrap();
        let ep = constant_clip(7, &[6, 6, 1], 14);
        let sw = sideways_episode(&mut net, &ep, Drain::Full).unwrap();
        let bp = bp_episode(&mut net, &ep).unwrap();
        for (a, b) in sw.updates.iter().zip(&bp.updates) {
            for (x, y) in a.grads().unwrap().iter().zip(b.grads().unwrap()) {
                assert!(relative_error(x, y) <= 1e-6);
            }
        }
        // Constant-clip average equals the single-frame gradient.
        let (_, single) = net.frame_gradient(ep.frame(1), LossTarget::Label(0)).unwrap();
        for (a, b) in bp.updates.iter().zip(&single) {
            for (x, y) in a.grads().unwrap().iter().zip(b) {
                assert!(relative_error(x, y) <= 1e-12);
            }
        }
    }

    #[test]
    fn accumulators_stay_finite() {
        let mut net = build_simple_cnn::<f64>(&[2, 2], 2, [4, 4, 1], 15).unwrap();
        let ep = clip(6, &[4, 4, 1], 16);
        let mut state = PipelineState::new(net.depth(), FrameSource::Streaming);
        for _ in 0..10 {
            sideways_step(&mut state, &mut net, &ep).unwrap();
            for acc in state.accumulators() {
                if let Some(sum) = acc.sum() {
                    assert!(sum.iter().all(Tensor::is_finite));
                }
            }
        }
    }
}
