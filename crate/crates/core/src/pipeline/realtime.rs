use crate::network::NetworkSpec;
use crate::optimizer::OptimizerState;
use crate::tensor::{self, Scalar, Tensor};

use super::{
    finish_episode, Drain, Episode, FrameSource, ModuleUpdate, PipelineState, Result, StepTrace,
    Targets,
};

/// Result of streaming a clip through an autoencoder in real time.
#[derive(Debug, Clone)]
pub struct AutoencodeOutcome<T> {
    /// One reconstruction per input frame, aligned by frame index. A frame the
    /// learner never processed gets the last reconstruction produced before it.
    pub outputs: Vec<Tensor<T>>,
    /// Frames (1-based) that arrived while the learner was busy.
    pub dropped: Vec<usize>,
    /// Step at which the first reconstruction appeared.
    pub first_output_step: Option<usize>,
    /// Number of per-step parameter updates applied across all modules.
    pub updates: usize,
    /// Mean of the per-step pseudo-gradients each module received.
    pub mean_updates: Vec<ModuleUpdate<T>>,
    pub trace: StepTrace,
}

impl<T: Scalar> AutoencodeOutcome<T> {
    /// Per-frame MSE of the aligned outputs against `stream`.
    pub fn per_frame_mse(&self, stream: &[Tensor<T>]) -> Vec<f64> {
        self.outputs
            .iter()
            .zip(stream)
            .map(|(o, x)| {
                tensor::mse(o, x)
                    .map(|(l, _)| l.as_f64())
                    .expect("outputs share the frame shape")
            })
            .collect()
    }

    pub fn mean_mse(&self, stream: &[Tensor<T>]) -> f64 {
        let v = self.per_frame_mse(stream);
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Frames a blocking learner accepts from a stream of `frames` frames, one
/// arriving per step.
pub fn bp_accepted_frames(depth: usize, frames: usize) -> Vec<usize> {
    (1..=frames)
        .filter_map(|t| FrameSource::BlockingRealtime.frame_at(t, depth, frames))
        .collect()
}

fn stream_through<T: Scalar>(
    net: &mut NetworkSpec<T>,
    stream: &[Tensor<T>],
    source: FrameSource,
    mut optimizer: Option<&mut OptimizerState<T>>,
    lr: f64,
) -> Result<AutoencodeOutcome<T>> {
    let episode = Episode::new(stream.to_vec(), Targets::Frames)?;
    let depth = net.depth();
    let mut state = PipelineState::new(depth, source);
    state.keep_outputs = true;
    super::restart(&mut state, net);
    let total = source.total_steps(depth, stream.len(), Drain::Full);
    let mut updates = 0;
    let mut first_output_step = None;
    for _ in 0..total {
        let out = state.step(net, &episode, optimizer.as_deref_mut(), lr)?;
        if optimizer.is_some() {
            updates += out.step_grads.iter().filter(|g| g.is_some()).count();
        }
        if first_output_step.is_none() && !state.outputs().is_empty() {
            first_output_step = Some(state.current_step());
        }
    }

    let mut by_frame: Vec<Option<Tensor<T>>> = vec![None; stream.len()];
    for a in state.take_outputs() {
        by_frame[a.origin - 1] = Some(a.value);
    }
    let mut dropped = Vec::new();
    let mut outputs = Vec::with_capacity(stream.len());
    let mut last = Tensor::zeros(net.output_shape());
    for (j, o) in by_frame.into_iter().enumerate() {
        match o {
            Some(v) => last = v,
            None => dropped.push(j + 1),
        }
        outputs.push(last.clone());
    }
    Ok(AutoencodeOutcome {
        outputs,
        dropped,
        first_output_step,
        updates,
        mean_updates: finish_episode(&state),
        trace: state.into_trace(),
    })
}

/// Sideways over a real-time stream: every frame enters the pipeline on
/// arrival and, with an optimizer attached, every loss event updates the
/// modules it reaches at the end of that step.
pub fn sideways_autoencode<T: Scalar>(
    net: &mut NetworkSpec<T>,
    stream: &[Tensor<T>],
    optimizer: Option<&mut OptimizerState<T>>,
    lr: f64,
) -> Result<AutoencodeOutcome<T>> {
    stream_through(net, stream, FrameSource::Streaming, optimizer, lr)
}

/// Blocking BP over a real-time stream: a frame is taken only when the
/// previous one has finished its full update cycle; frames arriving in
/// between are dropped and the last reconstruction is repeated for them.
pub fn realtime_bp_autoencode<T: Scalar>(
    net: &mut NetworkSpec<T>,
    stream: &[Tensor<T>],
    optimizer: Option<&mut OptimizerState<T>>,
    lr: f64,
) -> Result<AutoencodeOutcome<T>> {
    stream_through(net, stream, FrameSource::BlockingRealtime, optimizer, lr)
}
