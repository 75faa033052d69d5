//! The operations behind the command-line tool. Each takes a [`RunConfig`],
//! writes its files under `output_dir` and returns what it wrote.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{write_checkpoint, CheckpointError};
use crate::config::{ConfigError, LoadKind, RunConfig, TaskKind};
use crate::data::{self, Clip, DataError};
use crate::executor::{self, bench_speedup, ArtificialLoad, ExecutorConfig, ExecutorError, SpeedupReport};
use crate::network::{build_autoencoder, build_simple_cnn, NetworkError, NetworkLayout, NetworkSpec, Task};
use crate::optimizer::{OptimizerError, OptimizerState};
use crate::pipeline::{
    average_updates, bp_accepted_frames, realtime_bp_autoencode, sideways_autoencode, Mode,
    ModuleUpdate, PipelineError, StepTrace,
};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::verify::{self, GradcheckReport};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CommandError {
    /// Process exit code: 2 for configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CommandError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_file(path, &text)
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub epoch: usize,
    pub mode: Mode,
    pub loss: f64,
    /// Mean over every component of the applied update.
    pub grad_mean: f64,
    /// l2 norm of the applied update across all modules.
    pub grad_l2: f64,
    /// Accuracy of the batch (classification) or reconstruction MSE (autoencoding).
    pub metric: f64,
    pub lr: f64,
}

/// CSV sink that flushes after every row so partial runs keep their curves.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, task: TaskKind) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        let metric = match task {
            TaskKind::Classification => "accuracy",
            TaskKind::Autoencoding => "mse",
        };
        writeln!(out, "iteration,epoch,mode,loss,grad_mean,grad_l2,{metric},lr").map_err(io_err(path))?;
        out.flush().map_err(io_err(path))?;
        Ok(Self { out })
    }

    pub fn push(&mut self, r: &MetricsRow) -> std::io::Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.epoch,
            r.mode.name(),
            r.loss,
            r.grad_mean,
            r.grad_l2,
            r.metric,
            r.lr
        )?;
        self.out.flush()
    }
}

fn update_stats<T: Scalar>(updates: &[ModuleUpdate<T>]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for g in updates.iter().filter_map(ModuleUpdate::grads) {
        for t in g {
            for v in t.data() {
                let v = v.as_f64();
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, sq.sqrt())
}

/// The network a configuration describes, freshly initialized from its seed.
pub fn build_network<T: Scalar>(cfg: &RunConfig) -> Result<NetworkSpec<T>> {
    let n = &cfg.network;
    Ok(match cfg.task {
        TaskKind::Classification => {
            build_simple_cnn(&n.channels, cfg.num_classes(), [n.height, n.width, 3], cfg.seed)?
        }
        TaskKind::Autoencoding => build_autoencoder(&n.channels, [n.height, n.width, 3], cfg.seed)?,
    })
}

/// Training clips: the configured clip files, or a class-balanced synthetic set.
pub fn training_clips(cfg: &RunConfig) -> Result<Vec<Clip>> {
    let d = &cfg.data;
    if !d.clip_files.is_empty() {
        return d
            .clip_files
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut clip = data::read_clip_file(p)?;
                clip.label = d.clip_labels.get(i).copied();
                Ok(data::torus_pad(&clip, clip.len().max(d.clip_length)))
            })
            .collect();
    }
    let source_len = (d.stride + 1) * d.clip_length;
    let clips = data::balanced_dataset(
        &d.scene,
        d.train_clips,
        source_len,
        cfg.network.height,
        cfg.network.width,
        cfg.seed,
    )?;
    Ok(clips
        .iter()
        .map(|c| data::strided_clip(c, d.stride, d.clip_length))
        .collect())
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub net: NetworkSpec<T>,
    pub rows: Vec<MetricsRow>,
    /// Accuracy over the last `accuracy_window` training clips.
    pub rolling_accuracy: Option<f64>,
    /// Iteration at which the rolling accuracy first met `target_accuracy`.
    pub reached_target_at: Option<usize>,
}

/// Trains the configured network and reports each iteration to `on_row`.
pub fn train<T: Scalar>(cfg: &RunConfig, mut on_row: impl FnMut(&MetricsRow)) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut net = build_network::<T>(cfg)?;
    let clips = match cfg.task {
        TaskKind::Classification => training_clips(cfg)?,
        TaskKind::Autoencoding => Vec::new(),
    };
    let per_epoch = match cfg.task {
        TaskKind::Classification => clips.len().div_ceil(cfg.batch_size),
        TaskKind::Autoencoding => cfg.data.train_clips,
    };
    let mut opt_cfg = cfg.optimizer.clone();
    opt_cfg.schedule.iterations_per_epoch = per_epoch;
    let mut opt = OptimizerState::new(opt_cfg, &net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11);
    let limit = cfg.max_iterations.unwrap_or(usize::MAX);

    let mut rows = Vec::new();
    let mut window = VecDeque::with_capacity(cfg.accuracy_window);
    let mut reached_target_at = None;
    let mut iteration = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut rng);
        for it in 0..per_epoch {
            if iteration >= limit {
                break 'epochs;
            }
            let lr = opt.lr_at(epoch, it);
            let row = match cfg.task {
                TaskKind::Classification => {
                    let batch: Vec<usize> = order
                        .iter()
                        .cycle()
                        .skip(it * cfg.batch_size)
                        .take(cfg.batch_size)
                        .copied()
                        .collect();
                    let mut updates = Vec::with_capacity(batch.len());
                    let mut loss = 0.0;
                    let mut correct = 0usize;
                    for &c in &batch {
                        let clip = if cfg.data.hflip && rng.gen_bool(0.5) {
                            data::hflip(&clips[c])
                        } else {
                            clips[c].clone()
                        };
                        let ep = clip.to_episode::<T>()?;
                        let run = executor::run_episode(&cfg.executor, &mut net, &ep, cfg.mode)?;
                        loss += run.trace.mean_loss().unwrap_or(0.0);
                        let hit = run.trace.clip_prediction().is_some() && run.trace.clip_prediction() == clip.label;
                        correct += usize::from(hit);
                        if window.len() == cfg.accuracy_window {
                            window.pop_front();
                        }
                        window.push_back(hit);
                        updates.push(run.updates);
                    }
                    let avg = average_updates(&updates);
                    let (grad_mean, grad_l2) = update_stats(&avg);
                    opt.apply_update(&mut net, &avg, epoch, it)?;
                    MetricsRow {
                        iteration,
                        epoch,
                        mode: cfg.mode,
                        loss: loss / batch.len() as f64,
                        grad_mean,
                        grad_l2,
                        metric: correct as f64 / batch.len() as f64,
                        lr,
                    }
                }
                TaskKind::Autoencoding => {
                    let stream = data::generate_clip(
                        &cfg.data.scene,
                        cfg.data.clip_length,
                        cfg.network.height,
                        cfg.network.width,
                        cfg.seed.wrapping_mul(7919).wrapping_add(iteration as u64),
                    )?;
                    let frames: Vec<Tensor<T>> = stream.frames.iter().map(Tensor::cast).collect();
                    let out = match cfg.mode {
                        Mode::Sideways => sideways_autoencode(&mut net, &frames, Some(&mut opt), lr)?,
                        Mode::Bp => realtime_bp_autoencode(&mut net, &frames, Some(&mut opt), lr)?,
                    };
                    let (grad_mean, grad_l2) = update_stats(&out.mean_updates);
                    MetricsRow {
                        iteration,
                        epoch,
                        mode: cfg.mode,
                        loss: out.trace.mean_loss().unwrap_or(0.0),
                        grad_mean,
                        grad_l2,
                        metric: out.mean_mse(&frames),
                        lr,
                    }
                }
            };
            on_row(&row);
            rows.push(row);
            iteration += 1;
            if let Some(target) = cfg.target_accuracy {
                let acc = window.iter().filter(|&&h| h).count() as f64 / cfg.accuracy_window as f64;
                if cfg.task == TaskKind::Classification && window.len() == cfg.accuracy_window && acc >= target {
                    reached_target_at = Some(iteration);
                    break 'epochs;
                }
            }
        }
    }
    let rolling_accuracy = (!window.is_empty())
        .then(|| window.iter().filter(|&&h| h).count() as f64 / window.len() as f64);
    Ok(TrainOutcome {
        net,
        rows,
        rolling_accuracy,
        reached_target_at,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub rolling_accuracy: Option<f64>,
    pub reached_target_at: Option<usize>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

fn train_to_disk<T: Scalar>(cfg: &RunConfig) -> Result<TrainSummary> {
    let dir = &cfg.output_dir;
    prepare_dir(dir)?;
    let metrics = dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics, cfg.task)?;
    let mut write_error = None;
    let outcome = train::<T>(cfg, |row| {
        if let Err(e) = writer.push(row) {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(source) = write_error {
        return Err(CommandError::Io { path: metrics, source });
    }
    let checkpoint = dir.join("checkpoint.bin");
    write_checkpoint(&checkpoint, &outcome.net)?;
    let summary = TrainSummary {
        iterations: outcome.rows.len(),
        final_loss: outcome.rows.last().map(|r| r.loss),
        rolling_accuracy: outcome.rolling_accuracy,
        reached_target_at: outcome.reached_target_at,
        metrics,
        checkpoint,
    };
    write_json(&dir.join("report.json"), &summary)?;
    Ok(summary)
}

/// Trains, writing `metrics.csv`, `checkpoint.bin` and `report.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    match cfg.precision {
        Precision::Single => train_to_disk::<f32>(cfg),
        Precision::Double => train_to_disk::<f64>(cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRun {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub summary: TrainSummary,
}

/// Trains every point of [`RunConfig::sweep`] and writes `sweep.json`
/// listing the runs.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRun>> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for (name, c) in cfg.sweep() {
        let summary = cmd_train(&c)?;
        runs.push(SweepRun {
            name,
            lr: c.optimizer.lr,
            weight_decay: c.optimizer.weight_decay,
            summary,
        });
    }
    write_json(&cfg.output_dir.join("sweep.json"), &runs)?;
    Ok(runs)
}

/// Runs the finite-difference and unrolled-oracle suite; fails on any miss.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let report = verify::run_gradcheck(&cfg.gradcheck);
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    if !report.passed() {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        return Err(CommandError::CheckFailed(names.join(", ")));
    }
    Ok(report)
}

/// Runs one episode of the configured network and mode, writes
/// `trace.jsonl` and `utilization.csv`, and checks the schedule closed forms.
pub fn cmd_trace(cfg: &RunConfig) -> Result<StepTrace> {
    cfg.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let mut net = build_network::<f64>(cfg)?;
    let clip = data::generate_clip(
        &cfg.data.scene,
        cfg.trace.frames,
        cfg.network.height,
        cfg.network.width,
        cfg.seed,
    )?;
    let clip = match cfg.task {
        TaskKind::Classification => clip,
        TaskKind::Autoencoding => Clip { label: None, ..clip },
    };
    let mut exec = cfg.executor.clone();
    exec.drain = crate::pipeline::Drain::Full;
    let run = executor::run_episode(&exec, &mut net, &clip.to_episode()?, cfg.mode)?;
    write_file(&cfg.output_dir.join("trace.jsonl"), &run.trace.to_jsonl())?;
    write_file(&cfg.output_dir.join("utilization.csv"), &run.trace.utilization_csv())?;
    let violations = verify::schedule_violations(&run.trace, net.depth(), cfg.trace.frames, cfg.mode);
    if !violations.is_empty() {
        return Err(CommandError::CheckFailed(violations.join("; ")));
    }
    Ok(run.trace)
}

/// A network of `depth` small modules for throughput measurements.
pub fn bench_network(depth: usize, seed: u64) -> NetworkSpec<f64> {
    if depth == 1 {
        return verify::tiny_classifier(1, seed);
    }
    build_simple_cnn(&vec![4; depth - 1], 2, [8, 8, 3], seed).expect("valid layout")
}

pub fn bench_load(cfg: &RunConfig) -> ArtificialLoad {
    let d = Duration::from_secs_f64(cfg.bench.load_ms / 1e3);
    match cfg.bench.load {
        LoadKind::Spin => ArtificialLoad::calibrated(d),
        LoadKind::Sleep => ArtificialLoad::Sleep(d),
    }
}

/// Measures Sideways against blocking BP on the parallel engine and writes `report.json`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<SpeedupReport> {
    cfg.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let net = bench_network(cfg.bench.depth, cfg.seed);
    let exec = ExecutorConfig {
        load: Some(bench_load(cfg)),
        seed: cfg.seed,
        ..ExecutorConfig::parallel(cfg.bench.depth)
    };
    let report = bench_speedup(&exec, &net, cfg.bench.steps)?;
    write_file(&cfg.output_dir.join("report.json"), &(report.to_json() + "\n"))?;
    write_file(&cfg.output_dir.join("utilization.csv"), &bench_utilization(&exec, &net, cfg.bench.steps)?)?;
    Ok(report)
}

fn bench_utilization(exec: &ExecutorConfig, net: &NetworkSpec<f64>, steps: usize) -> Result<String> {
    let mut out = String::from("mode,step,module,busy\n");
    let sim = ExecutorConfig {
        engine: executor::Engine::Simulator,
        load: None,
        ..exec.clone()
    };
    for mode in [Mode::Bp, Mode::Sideways] {
        let frames = steps.max(1);
        let clip: Vec<Tensor<f64>> = (0..frames)
            .map(|i| verify::random_tensor(net.input_shape(), i as u64))
            .collect();
        let ep = crate::pipeline::Episode::new(clip, crate::pipeline::Targets::Label(0))?;
        let mut state = crate::pipeline::PipelineState::new(net.depth(), crate::pipeline::FrameSource::for_mode(mode));
        let mut net = net.clone();
        executor::drive(&sim, &mut state, &mut net, &ep, None, 0.0, steps)?;
        for line in state.trace().utilization_csv().lines().skip(1) {
            out.push_str(mode.name());
            out.push(',');
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RealtimeReport {
    pub depth: usize,
    pub stream_length: usize,
    pub delta: f64,
    pub train_streams: usize,
    pub eval_streams: usize,
    /// Held-out per-frame MSE, averaged over evaluation streams.
    pub sideways_mse: f64,
    pub bp_mse: f64,
    /// Frames BP dropped on one evaluation stream.
    pub dropped_frames: usize,
    /// Drops predicted by a learner busy for `2(D-1)` steps after each frame.
    pub expected_dropped: usize,
    pub sideways_updates: usize,
    pub bp_updates: usize,
}

/// Drops for a learner that, after accepting a frame, ignores the next
/// `2(depth-1)` arrivals.
pub fn blocking_drop_count(depth: usize, frames: usize) -> usize {
    let mut busy_until = 0;
    let mut dropped = 0;
    for t in 1..=frames {
        if t <= busy_until {
            dropped += 1;
        } else {
            busy_until = t + 2 * (depth - 1);
        }
    }
    dropped
}

fn realtime_run<T: Scalar>(cfg: &RunConfig, mut on_row: impl FnMut(&MetricsRow)) -> Result<RealtimeReport> {
    let r = &cfg.realtime;
    let base = build_autoencoder::<T>(&r.channels, [r.height, r.width, 3], cfg.seed)?;
    let stream = |seed: u64| -> Result<Vec<Tensor<T>>> {
        let clip = data::generate_clip(&cfg.data.scene, r.stream_length, r.height, r.width, seed)?;
        Ok(clip.frames.iter().map(Tensor::cast).collect())
    };
    let lr = cfg.optimizer.lr;
    let mut nets = [base.clone(), base.clone()];
    let mut updates = [0usize; 2];
    let modes = [Mode::Sideways, Mode::Bp];
    for (slot, mode) in modes.into_iter().enumerate() {
        let net = &mut nets[slot];
        let mut opt = OptimizerState::new(cfg.optimizer.clone(), net);
        for s in 0..r.train_streams {
            let frames = stream(cfg.seed.wrapping_mul(1_000_003).wrapping_add(s as u64))?;
            let out = match mode {
                Mode::Sideways => sideways_autoencode(net, &frames, Some(&mut opt), lr)?,
                Mode::Bp => realtime_bp_autoencode(net, &frames, Some(&mut opt), lr)?,
            };
            updates[slot] += out.updates;
            let (grad_mean, grad_l2) = update_stats(&out.mean_updates);
            on_row(&MetricsRow {
                iteration: s,
                epoch: 0,
                mode,
                loss: out.trace.mean_loss().unwrap_or(0.0),
                grad_mean,
                grad_l2,
                metric: out.mean_mse(&frames),
                lr,
            });
        }
    }
    let mut mse = [0.0f64; 2];
    let mut dropped = 0;
    for e in 0..r.eval_streams {
        let frames = stream(cfg.seed.wrapping_mul(1_000_003).wrapping_add((1 << 40) + e as u64))?;
        let sw = sideways_autoencode(&mut nets[0], &frames, None, 0.0)?;
        let bp = realtime_bp_autoencode(&mut nets[1], &frames, None, 0.0)?;
        mse[0] += sw.mean_mse(&frames) / r.eval_streams as f64;
        mse[1] += bp.mean_mse(&frames) / r.eval_streams as f64;
        if e == 0 {
            dropped = bp.dropped.len();
        }
    }
    let depth = base.depth();
    debug_assert_eq!(r.stream_length - bp_accepted_frames(depth, r.stream_length).len(), dropped);
    Ok(RealtimeReport {
        depth,
        stream_length: r.stream_length,
        delta: cfg.data.scene.delta,
        train_streams: r.train_streams,
        eval_streams: r.eval_streams,
        sideways_mse: mse[0],
        bp_mse: mse[1],
        dropped_frames: dropped,
        expected_dropped: blocking_drop_count(depth, r.stream_length),
        sideways_updates: updates[0],
        bp_updates: updates[1],
    })
}

/// Trains the autoencoder in both modes on real-time streams and compares
/// held-out per-frame MSE, without writing files.
pub fn realtime_compare(cfg: &RunConfig, on_row: impl FnMut(&MetricsRow)) -> Result<RealtimeReport> {
    cfg.validate()?;
    match cfg.precision {
        Precision::Single => realtime_run::<f32>(cfg, on_row),
        Precision::Double => realtime_run::<f64>(cfg, on_row),
    }
}

/// [`realtime_compare`], writing `metrics.csv` and `report.json`.
pub fn cmd_realtime_compare(cfg: &RunConfig) -> Result<RealtimeReport> {
    cfg.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let metrics = cfg.output_dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics, TaskKind::Autoencoding)?;
    let mut write_error = None;
    let report = realtime_compare(cfg, |row| {
        if let Err(e) = writer.push(row) {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(source) = write_error {
        return Err(CommandError::Io { path: metrics, source });
    }
    if report.dropped_frames != report.expected_dropped {
        return Err(CommandError::CheckFailed(format!(
            "BP dropped {} frames, simulation predicts {}",
            report.dropped_frames, report.expected_dropped
        )));
    }
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Layout summary of the configured network.
pub fn describe_network(cfg: &RunConfig) -> Result<NetworkLayout> {
    let net = build_network::<f32>(cfg)?;
    let layout = net.layout();
    debug_assert!(matches!(
        (cfg.task, layout.task),
        (TaskKind::Classification, Task::Classification { .. }) | (TaskKind::Autoencoding, Task::Autoencoding)
    ));
    Ok(layout)
}
