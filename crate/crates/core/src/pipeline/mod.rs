//! Step-indexed training schedules.
//!
//! Time advances in computation steps. On every step each module may run one
//! forward unit (consume the activation its predecessor emitted on the
//! previous step) and one backward unit (consume the pseudo-gradient its
//! successor emitted on the previous step). The loss takes no time: the top
//! module's output is scored in the same step and the top module runs its
//! backward against it immediately.
//!
//! BP and Sideways differ only in when module 1 admits frames. BP admits a
//! frame once the previous one has finished its whole update cycle. Sideways
//! admits a frame on every step. Everything else, including which activation a
//! backward pass is evaluated at, follows from the slot mechanics.

mod lane;
mod noise;
mod realtime;
mod state;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{LossTarget, NetworkError};
use crate::optimizer::OptimizerError;
use crate::tensor::{Scalar, Tensor, TensorError};

pub use lane::{lane_step, LaneContext, LaneInput, LaneOutput, ModuleAccumulator};
pub use noise::{measure_gradient_noise, ModuleNoise, NoiseReport};
pub use realtime::{
    realtime_bp_autoencode, sideways_autoencode, AutoencodeOutcome, bp_accepted_frames,
};
pub use state::{
    bp_episode, finish_episode, restart, run_schedule, sideways_episode, sideways_step,
    EpisodeResult, PipelineState, StepOutcome,
};

/// Number of computation steps in one update cycle of a depth-`depth` network.
pub fn cycle_length(depth: usize) -> usize {
    assert!(depth >= 1, "depth must be at least 1");
    2 * depth - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bp,
    Sideways,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Bp => "bp",
            Mode::Sideways => "sideways",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bp" => Ok(Mode::Bp),
            "sideways" => Ok(Mode::Sideways),
            other => Err(format!("unknown mode `{other}` (expected bp or sideways)")),
        }
    }
}

/// When module 1 takes a new frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameSource {
    /// Frame `t` enters at step `t` (Sideways).
    Streaming,
    /// Frames are queued; frame `n` enters once frame `n-1` has finished its
    /// update cycle (BP in the classification setting).
    Blocking,
    /// Frame `t` arrives at step `t` and is dropped if the network is busy
    /// (BP under a real-time input stream).
    BlockingRealtime,
}

impl FrameSource {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Bp => FrameSource::Blocking,
            Mode::Sideways => FrameSource::Streaming,
        }
    }

    /// Frame (1-based) admitted by module 1 at `step`, if any.
    pub fn frame_at(&self, step: usize, depth: usize, frames: usize) -> Option<usize> {
        let period = cycle_length(depth);
        let frame = match self {
            FrameSource::Streaming => step,
            FrameSource::Blocking => {
                if !(step - 1).is_multiple_of(period) {
                    return None;
                }
                (step - 1) / period + 1
            }
            FrameSource::BlockingRealtime => {
                if !(step - 1).is_multiple_of(period) {
                    return None;
                }
                step
            }
        };
        (frame <= frames).then_some(frame)
    }

    /// Steps needed for every admitted frame to finish its update cycle.
    pub fn total_steps(&self, depth: usize, frames: usize, drain: Drain) -> usize {
        let tail = match drain {
            Drain::Full => 2 * (depth - 1),
            Drain::None => 0,
        };
        match self {
            FrameSource::Streaming | FrameSource::BlockingRealtime => frames + tail,
            FrameSource::Blocking => frames * cycle_length(depth),
        }
    }
}

/// Whether to keep stepping after the last frame so trailing gradients land.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Drain {
    #[default]
    Full,
    None,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("episode must contain at least one frame")]
    EmptyEpisode,
    #[error("frame {frame} has shape {actual:?}, expected {expected:?}")]
    FrameShape {
        frame: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invariant violated at step {step}: {source}\n{trace}")]
    Invariant {
        step: usize,
        source: NetworkError,
        trace: String,
    },
    #[error("worker for module {module} panicked at step {step}")]
    WorkerPanic { module: usize, step: usize },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Per-frame supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Targets {
    /// One label for the whole clip (`y^t = y^{t+1}`).
    Label(usize),
    /// Each frame is its own target.
    Frames,
}

/// A clip `x^1..x^K` and its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    frames: Vec<Tensor<T>>,
    targets: Targets,
}

impl<T: Scalar> Episode<T> {
    pub fn new(frames: Vec<Tensor<T>>, targets: Targets) -> Result<Self> {
        let first = frames.first().ok_or(PipelineError::EmptyEpisode)?;
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != first.shape() {
                return Err(PipelineError::FrameShape {
                    frame: i + 1,
                    expected: first.shape().to_vec(),
                    actual: f.shape().to_vec(),
                });
            }
        }
        Ok(Self { frames, targets })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame `origin` (1-based).
    pub fn frame(&self, origin: usize) -> &Tensor<T> {
        &self.frames[origin - 1]
    }

    pub fn frames(&self) -> &[Tensor<T>] {
        &self.frames
    }

    pub fn targets(&self) -> Targets {
        self.targets
    }

    pub fn target(&self, origin: usize) -> LossTarget<'_, T> {
        match self.targets {
            Targets::Label(label) => LossTarget::Label(label),
            Targets::Frames => LossTarget::Frame(self.frame(origin)),
        }
    }
}

/// A forward activation tagged with the frame that spawned it.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation<T> {
    pub origin: usize,
    pub value: Tensor<T>,
}

/// A backward pseudo-gradient tagged with the frame whose loss produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGrad<T> {
    pub origin: usize,
    pub value: Tensor<T>,
}

/// One module's activity during one computation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub module: usize,
    pub fwd_origin: Option<usize>,
    pub bwd_origin: Option<usize>,
    pub masked: bool,
}

impl StepRecord {
    pub fn busy(&self) -> bool {
        self.fwd_origin.is_some() || !self.masked
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEvent {
    pub step: usize,
    pub origin: usize,
    pub loss: f64,
    /// Class probabilities for classification; empty otherwise.
    pub probabilities: Vec<f64>,
}

/// Append-only audit trail of an episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub records: Vec<StepRecord>,
    pub losses: Vec<LossEvent>,
}

impl StepTrace {
    pub fn steps(&self) -> usize {
        self.records.iter().map(|r| r.step).max().unwrap_or(0)
    }

    pub fn record(&self, step: usize, module: usize) -> Option<&StepRecord> {
        self.records
            .iter()
            .find(|r| r.step == step && r.module == module)
    }

    pub fn step_records(&self, step: usize) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(move |r| r.step == step)
    }

    /// JSON lines, one object per (step, module).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// `step,module,busy` rows.
    pub fn utilization_csv(&self) -> String {
        let mut out = String::from("step,module,busy\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.step, r.module, u8::from(r.busy()));
        }
        out
    }

    pub fn mean_loss(&self) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        Some(self.losses.iter().map(|l| l.loss).sum::<f64>() / self.losses.len() as f64)
    }

    /// Clip-level prediction: argmax of the mean class probabilities.
    pub fn clip_prediction(&self) -> Option<usize> {
        let first = self.losses.first()?;
        if first.probabilities.is_empty() {
            return None;
        }
        let mut mean = vec![0.0; first.probabilities.len()];
        for l in &self.losses {
            for (m, p) in mean.iter_mut().zip(&l.probabilities) {
                *m += p;
            }
        }
        mean.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

/// Result of masked episode averaging for one module.
#[derive(Debug, Clone, PartialEq)]
pub enum ModuleUpdate<T> {
    Average(Vec<Tensor<T>>),
    /// No pseudo-gradient ever reached the module (`γ_i = 0`).
    NoUpdate,
}

impl<T: Scalar> ModuleUpdate<T> {
    pub fn grads(&self) -> Option<&[Tensor<T>]> {
        match self {
            ModuleUpdate::Average(g) => Some(g),
            ModuleUpdate::NoUpdate => None,
        }
    }

    pub fn is_no_update(&self) -> bool {
        matches!(self, ModuleUpdate::NoUpdate)
    }
}

/// Averages per-module updates over a batch of episodes. Modules that got
/// no update in any episode stay [`ModuleUpdate::NoUpdate`].
pub fn average_updates<T: Scalar>(batch: &[Vec<ModuleUpdate<T>>]) -> Vec<ModuleUpdate<T>> {
    let Some(first) = batch.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|i| {
            let mut sum: Option<Vec<Tensor<T>>> = None;
            let mut n = 0usize;
            for ep in batch {
                if let ModuleUpdate::Average(g) = &ep[i] {
                    n += 1;
                    match &mut sum {
                        None => sum = Some(g.clone()),
                        Some(s) => {
                            for (a, b) in s.iter_mut().zip(g) {
                                a.add_assign(b).expect("same module shapes");
                            }
                        }
                    }
                }
            }
            match sum {
                Some(mut s) => {
                    let inv = T::one() / T::from_f64(n as f64);
                    s.iter_mut().for_each(|t| t.scale(inv));
                    ModuleUpdate::Average(s)
                }
                None => ModuleUpdate::NoUpdate,
            }
        })
        .collect()
}
