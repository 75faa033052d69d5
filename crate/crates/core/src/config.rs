//! Run configuration: a TOML document with one table per concern.
//!
//! Every field has a default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClassRule, SpriteSceneSpec};
use crate::executor::{Engine, ExecutorConfig};
use crate::network::SIMPLE_CNN_CHANNELS;
use crate::optimizer::{LrSchedule, OptimizerConfig, Rule, SWEEP_LEARNING_RATE, SWEEP_WEIGHT_DECAY};
use crate::pipeline::{Drain, Mode};
use crate::tensor::Precision;
use crate::verify::GradcheckConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Classification,
    Autoencoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Output channels of the convolutional modules.
    pub channels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: SIMPLE_CNN_CHANNELS.to_vec(),
            height: 112,
            width: 112,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SpriteSceneSpec,
    /// Frames per training clip.
    pub clip_length: usize,
    /// Distinct synthetic clips per epoch.
    pub train_clips: usize,
    /// Temporal stride `k`: every `(k+1)`-th frame is kept.
    pub stride: usize,
    /// Mirror clips left to right with probability one half.
    pub hflip: bool,
    /// External clips in the binary clip format, used instead of synthetic data.
    pub clip_files: Vec<PathBuf>,
    /// Labels of `clip_files`, one per file (classification only).
    pub clip_labels: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SpriteSceneSpec::default(),
            clip_length: 64,
            train_clips: 512,
            stride: 0,
            hflip: true,
            clip_files: Vec::new(),
            clip_labels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealtimeConfig {
    pub stream_length: usize,
    pub train_streams: usize,
    pub eval_streams: usize,
    /// Channels of the encoder modules; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl Default for RealtimeConfig {
    fn default() -> Self {
        Self {
            stream_length: 64,
            train_streams: 128,
            eval_streams: 16,
            channels: vec![8, 8, 16, 16, 16],
            height: 16,
            width: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadKind {
    #[default]
    Spin,
    Sleep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub depth: usize,
    pub steps: usize,
    /// Artificial work per forward or backward unit, in milliseconds.
    pub load_ms: f64,
    pub load: LoadKind,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            steps: 100,
            load_ms: 10.0,
            load: LoadKind::Spin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub frames: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self { frames: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub mode: Mode,
    pub seed: u64,
    pub precision: Precision,
    pub epochs: usize,
    /// Stops after this many parameter updates, if set.
    pub max_iterations: Option<usize>,
    /// Episodes averaged per parameter update.
    pub batch_size: usize,
    /// Clips in the rolling training-accuracy window.
    pub accuracy_window: usize,
    /// Stops once the rolling accuracy reaches this value, if set.
    pub target_accuracy: Option<f64>,
    pub output_dir: PathBuf,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub executor: ExecutorConfig,
    pub data: DataConfig,
    pub realtime: RealtimeConfig,
    pub bench: BenchConfig,
    pub trace: TraceConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Classification,
            mode: Mode::Sideways,
            seed: 0,
            precision: Precision::Single,
            epochs: 300,
            max_iterations: None,
            batch_size: 8,
            accuracy_window: 64,
            target_accuracy: None,
            output_dir: PathBuf::from("runs/default"),
            network: NetworkConfig::default(),
            optimizer: OptimizerConfig::default(),
            executor: ExecutorConfig::simulator(),
            data: DataConfig::default(),
            realtime: RealtimeConfig::default(),
            bench: BenchConfig::default(),
            trace: TraceConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    /// A configuration small enough to train in seconds on a laptop CPU.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.network = NetworkConfig {
            channels: vec![8, 8, 16, 16, 16],
            height: 16,
            width: 16,
        };
        c.data.clip_length = 8;
        c.data.train_clips = 256;
        c.data.hflip = false;
        c.data.scene.delta = 0.25;
        c.epochs = 100;
        c.max_iterations = Some(2000);
        c.target_accuracy = Some(0.9);
        c.optimizer = OptimizerConfig {
            rule: Rule::ADAM,
            lr: 1e-3,
            clip_value: Some(1.0),
            weight_decay: 0.0,
            schedule: LrSchedule::constant(),
        };
        c.output_dir = PathBuf::from("runs/desk");
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" | "default" => Some(Self::default()),
            "desk" => Some(Self::desk()),
            "sweep" => Some(Self::default()),
            _ => None,
        }
    }

    /// The learning-rate and weight-decay grid around this configuration,
    /// one named run per point, each writing under its own subdirectory.
    pub fn sweep(&self) -> Vec<(String, RunConfig)> {
        let mut runs = Vec::new();
        for lr in SWEEP_LEARNING_RATE {
            for wd in SWEEP_WEIGHT_DECAY {
                let name = format!("lr{lr:e}_wd{wd:e}");
                let mut c = self.clone();
                c.optimizer.lr = lr;
                c.optimizer.weight_decay = wd;
                c.output_dir = self.output_dir.join(&name);
                runs.push((name, c));
            }
        }
        runs
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Modules of the network under `[network]`: one per convolution plus the head or decoder.
    pub fn depth(&self) -> usize {
        self.network.channels.len() + 1
    }

    pub fn num_classes(&self) -> usize {
        self.data.scene.class_rule.num_classes()
    }

    /// Checks cross-field constraints and reports the first offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, seed) in [
            ("seed", self.seed),
            ("executor.seed", self.executor.seed),
            ("gradcheck.seed", self.gradcheck.seed),
        ] {
            if seed > i64::MAX as u64 {
                return Err(invalid(field, "must fit in a signed 64-bit integer"));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.accuracy_window == 0 {
            return Err(invalid("accuracy_window", "must be at least 1"));
        }
        if let Some(a) = self.target_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid("target_accuracy", "must be in [0, 1]"));
            }
        }
        if self.network.channels.is_empty() || self.network.channels.contains(&0) {
            return Err(invalid("network.channels", "need at least one nonzero channel count"));
        }
        if self.network.height == 0 || self.network.width == 0 {
            return Err(invalid("network.height", "frame extents must be nonzero"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(invalid("optimizer.lr", "must be a positive number"));
        }
        if o.weight_decay < 0.0 {
            return Err(invalid("optimizer.weight_decay", "must be >= 0"));
        }
        if let Some(c) = o.clip_value {
            if c <= 0.0 {
                return Err(invalid("optimizer.clip_value", "must be > 0"));
            }
        }
        if o.schedule.decay_factor <= 0.0 {
            return Err(invalid("optimizer.schedule.decay_factor", "must be > 0"));
        }
        match o.rule {
            Rule::Momentum { beta } if !(0.0..1.0).contains(&beta) => {
                return Err(invalid("optimizer.beta", "must be in [0, 1)"))
            }
            Rule::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                return Err(invalid("optimizer.beta1", "Adam needs betas in [0, 1) and eps > 0"))
            }
            _ => {}
        }
        let e = &self.executor;
        if e.workers == 0 {
            return Err(invalid("executor.workers", "must be at least 1"));
        }
        if e.engine == Engine::Parallel && e.workers != self.depth() {
            return Err(invalid(
                "executor.workers",
                format!("parallel engine needs workers == depth ({})", self.depth()),
            ));
        }
        if self.task == TaskKind::Classification && e.drain == Drain::None && self.mode == Mode::Sideways {
            let d = self.depth();
            if self.data.clip_length < 2 * d - 1 {
                return Err(invalid(
                    "executor.drain",
                    "without a drain, clips shorter than the cycle length never update module 1",
                ));
            }
        }
        if self.data.clip_length == 0 {
            return Err(invalid("data.clip_length", "must be at least 1"));
        }
        if self.data.train_clips == 0 && self.data.clip_files.is_empty() {
            return Err(invalid("data.train_clips", "must be at least 1"));
        }
        if !self.data.clip_files.is_empty()
            && self.task == TaskKind::Classification
            && self.data.clip_labels.len() != self.data.clip_files.len()
        {
            return Err(invalid("data.clip_labels", "need one label per clip file"));
        }
        if let Some(l) = self.data.clip_labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(invalid("data.clip_labels", format!("label {l} out of range")));
        }
        let s = &self.data.scene;
        if s.class_rule == ClassRule::MotionDirection4way && s.delta == 0.0 && self.task == TaskKind::Classification {
            return Err(invalid("data.scene.delta", "motion-direction labels need delta > 0"));
        }
        s.validate(self.network.height, self.network.width)
            .map_err(|e| invalid("data.scene", e.to_string()))?;
        let r = &self.realtime;
        if r.stream_length == 0 || r.train_streams == 0 || r.eval_streams == 0 {
            return Err(invalid("realtime.stream_length", "stream sizes must be at least 1"));
        }
        if r.channels.is_empty() || r.channels.contains(&0) {
            return Err(invalid("realtime.channels", "need at least one nonzero channel count"));
        }
        let b = &self.bench;
        if b.depth == 0 || b.steps == 0 {
            return Err(invalid("bench.depth", "depth and steps must be at least 1"));
        }
        if b.load_ms.is_nan() || b.load_ms < 0.0 {
            return Err(invalid("bench.load_ms", "must be >= 0"));
        }
        if self.trace.frames == 0 {
            return Err(invalid("trace.frames", "must be at least 1"));
        }
        Ok(())
    }
}
