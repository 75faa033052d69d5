//! Engines that drive pipeline steps: a sequential simulator and a
//! depth-parallel runtime with one thread per module.
//!
//! Both engines call [`lane_step`] with the same inputs in the same step
//! order, so they agree bit for bit.

use std::hint::black_box;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Barrier, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NetworkSpec, Task};
use crate::optimizer::{ModuleOptimizer, OptimizerState};
use crate::pipeline::{
    finish_episode, lane_step, restart, Activation, Drain, Episode, FrameSource, LaneContext,
    LaneInput, LossEvent, Mode, ModuleAccumulator, ModuleUpdate, PipelineError, PipelineState,
    PseudoGrad, StepRecord, StepTrace, Targets,
};
use crate::tensor::{Scalar, Tensor};
use crate::verify::random_tensor;

/// Synthetic work added to every forward and every backward unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtificialLoad {
    /// Busy loop of dependent multiply-adds.
    Flops(u64),
    /// Blocks the thread, like waiting on an accelerator.
    Sleep(Duration),
}

impl ArtificialLoad {
    pub fn run(&self) {
        match *self {
            ArtificialLoad::Flops(n) => spin(n),
            ArtificialLoad::Sleep(d) => std::thread::sleep(d),
        }
    }

    /// A spin load that takes roughly `target` on this machine.
    pub fn calibrated(target: Duration) -> Self {
        let probe = 2_000_000u64;
        let mut best = Duration::MAX;
        for _ in 0..3 {
            let t = Instant::now();
            spin(probe);
            best = best.min(t.elapsed());
        }
        let per_op = best.as_secs_f64() / probe as f64;
        ArtificialLoad::Flops((target.as_secs_f64() / per_op.max(1e-12)).ceil() as u64)
    }

    pub fn describe(&self) -> String {
        match self {
            ArtificialLoad::Flops(n) => format!("flops:{n}"),
            ArtificialLoad::Sleep(d) => format!("sleep:{}ms", d.as_secs_f64() * 1e3),
        }
    }
}

fn spin(n: u64) {
    let mut x = 1.0f64;
    for _ in 0..n {
        x = black_box(x.mul_add(0.999_999_9, 1e-7));
    }
    black_box(x);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    #[default]
    Simulator,
    Parallel,
}

#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedPanic {
    pub module: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    pub engine: Engine,
    /// Worker threads; must equal the depth for the parallel engine.
    pub workers: usize,
    pub load: Option<ArtificialLoad>,
    pub drain: Drain,
    pub seed: u64,
    #[doc(hidden)]
    #[serde(skip)]
    pub inject_panic: Option<InjectedPanic>,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self::simulator()
    }
}

impl ExecutorConfig {
    pub fn simulator() -> Self {
        Self {
            engine: Engine::Simulator,
            workers: 1,
            load: None,
            drain: Drain::Full,
            seed: 0,
            inject_panic: None,
        }
    }

    pub fn parallel(depth: usize) -> Self {
        Self {
            engine: Engine::Parallel,
            workers: depth,
            ..Self::simulator()
        }
    }

    pub fn validate(&self, depth: usize) -> Result<(), ExecutorError> {
        if self.workers == 0 {
            return Err(ExecutorError::Config("workers must be at least 1".into()));
        }
        if self.engine == Engine::Parallel && self.workers != depth {
            return Err(ExecutorError::Config(format!(
                "parallel engine needs one worker per module: workers = {}, depth = {depth}",
                self.workers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("invalid executor config: {0}")]
    Config(String),
    #[error("episode aborted: {source}")]
    Aborted {
        source: PipelineError,
        /// Records of every step completed before the failure.
        partial: Box<StepTrace>,
    },
}

impl ExecutorError {
    pub fn pipeline_error(&self) -> Option<&PipelineError> {
        match self {
            ExecutorError::Aborted { source, .. } => Some(source),
            ExecutorError::Config(_) => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub total: Duration,
    pub per_step: Vec<Duration>,
}

impl Timing {
    pub fn mean_step(&self) -> Duration {
        if self.per_step.is_empty() {
            return Duration::ZERO;
        }
        self.per_step.iter().sum::<Duration>() / self.per_step.len() as u32
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeRun<T> {
    pub updates: Vec<ModuleUpdate<T>>,
    pub gammas: Vec<usize>,
    pub trace: StepTrace,
    pub timing: Timing,
}

/// Advances `state` by `steps` computation steps with the configured engine.
pub fn drive<T: Scalar>(
    cfg: &ExecutorConfig,
    state: &mut PipelineState<T>,
    net: &mut NetworkSpec<T>,
    episode: &Episode<T>,
    optimizer: Option<&mut OptimizerState<T>>,
    lr: f64,
    steps: usize,
) -> Result<Timing, ExecutorError> {
    cfg.validate(net.depth())?;
    state.load = cfg.load;
    match cfg.engine {
        Engine::Simulator => drive_sequential(cfg, state, net, episode, optimizer, lr, steps),
        Engine::Parallel => drive_parallel(cfg, state, net, episode, optimizer, lr, steps),
    }
}

fn check_injected(cfg: &ExecutorConfig, module: usize, step: usize) {
    if let Some(p) = cfg.inject_panic {
        if p.module == module && p.step == step {
            panic!("injected fault in module {module} at step {step}");
        }
    }
}

fn drive_sequential<T: Scalar>(
    cfg: &ExecutorConfig,
    state: &mut PipelineState<T>,
    net: &mut NetworkSpec<T>,
    episode: &Episode<T>,
    mut optimizer: Option<&mut OptimizerState<T>>,
    lr: f64,
    steps: usize,
) -> Result<Timing, ExecutorError> {
    let start = Instant::now();
    let mut per_step = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t0 = Instant::now();
        let next = state.current_step() + 1;
        let r = catch_unwind(AssertUnwindSafe(|| {
            for m in 1..=net.depth() {
                check_injected(cfg, m, next);
            }
            state.step(net, episode, optimizer.as_deref_mut(), lr)
        }));
        let failure = match r {
            Ok(Ok(_)) => None,
            Ok(Err(e)) => Some(e),
            Err(_) => Some(PipelineError::WorkerPanic {
                module: cfg.inject_panic.map_or(0, |p| p.module),
                step: next,
            }),
        };
        if let Some(source) = failure {
            return Err(ExecutorError::Aborted {
                source,
                partial: Box::new(state.trace().clone()),
            });
        }
        per_step.push(t0.elapsed());
    }
    Ok(Timing {
        total: start.elapsed(),
        per_step,
    })
}

struct WorkerLog<T> {
    records: Vec<StepRecord>,
    losses: Vec<LossEvent>,
    outputs: Vec<Activation<T>>,
    per_step: Vec<Duration>,
}

#[derive(Clone, Copy)]
struct Shared<'a, T> {
    cfg: &'a ExecutorConfig,
    episode: &'a Episode<T>,
    task: Task,
    source: FrameSource,
    depth: usize,
    first_step: usize,
    steps: usize,
    lr: f64,
    keep_outputs: bool,
    forward_mail: &'a [Mutex<Option<Activation<T>>>],
    backward_mail: &'a [Mutex<Option<PseudoGrad<T>>>],
    barrier: &'a Barrier,
    abort: &'a AtomicBool,
    failures: &'a Mutex<Vec<PipelineError>>,
}

fn worker<T: Scalar>(
    sh: Shared<'_, T>,
    i: usize,
    module: &mut crate::network::LayerModule<T>,
    acc: &mut ModuleAccumulator<T>,
    mut opt: Option<&mut ModuleOptimizer<T>>,
) -> WorkerLog<T> {
    let mut log = WorkerLog {
        records: Vec::with_capacity(sh.steps),
        losses: Vec::new(),
        outputs: Vec::new(),
        per_step: Vec::new(),
    };
    let d = sh.depth;
    for k in 1..=sh.steps {
        let t = sh.first_step + k;
        let t0 = Instant::now();
        let forward = if i == 0 {
            sh.source
                .frame_at(t, d, sh.episode.len())
                .map(|f| Activation {
                    origin: f,
                    value: sh.episode.frame(f).clone(),
                })
        } else {
            sh.forward_mail[i - 1].lock().unwrap().take()
        };
        let upstream = if i + 1 < d {
            sh.backward_mail[i + 1].lock().unwrap().take()
        } else {
            None
        };
        sh.barrier.wait();

        let ctx = LaneContext {
            step: t,
            depth: d,
            task: sh.task,
            episode: sh.episode,
            load: sh.cfg.load,
            keep_outputs: sh.keep_outputs,
            lr: sh.lr,
        };
        let r = catch_unwind(AssertUnwindSafe(|| {
            check_injected(sh.cfg, i + 1, t);
            lane_step(module, acc, opt.as_deref_mut(), &ctx, LaneInput { forward, upstream })
        }));
        match r {
            Ok(Ok(out)) => {
                *sh.forward_mail[i].lock().unwrap() = out.forward;
                *sh.backward_mail[i].lock().unwrap() = out.downstream;
                log.records.push(out.record);
                log.losses.extend(out.loss);
                log.outputs.extend(out.top_output);
            }
            Ok(Err(e)) => {
                sh.failures.lock().unwrap().push(e);
                sh.abort.store(true, Ordering::SeqCst);
            }
            Err(_) => {
                sh.failures
                    .lock()
                    .unwrap()
                    .push(PipelineError::WorkerPanic { module: i + 1, step: t });
                sh.abort.store(true, Ordering::SeqCst);
            }
        }

        sh.barrier.wait();
        if i == 0 {
            log.per_step.push(t0.elapsed());
        }
        if sh.abort.load(Ordering::SeqCst) {
            break;
        }
    }
    log
}

fn drive_parallel<T: Scalar>(
    cfg: &ExecutorConfig,
    state: &mut PipelineState<T>,
    net: &mut NetworkSpec<T>,
    episode: &Episode<T>,
    optimizer: Option<&mut OptimizerState<T>>,
    lr: f64,
    steps: usize,
) -> Result<Timing, ExecutorError> {
    let depth = net.depth();
    let forward_mail: Vec<_> = state.forward_slots.drain(..).map(Mutex::new).collect();
    let backward_mail: Vec<_> = state.backward_slots.drain(..).map(Mutex::new).collect();
    let mut accs = std::mem::take(&mut state.accumulators);
    let barrier = Barrier::new(depth);
    let abort = AtomicBool::new(false);
    let failures = Mutex::new(Vec::new());
    let shared = Shared {
        cfg,
        episode,
        task: net.task,
        source: state.source(),
        depth,
        first_step: state.current_step(),
        steps,
        lr,
        keep_outputs: state.keep_outputs,
        forward_mail: &forward_mail,
        backward_mail: &backward_mail,
        barrier: &barrier,
        abort: &abort,
        failures: &failures,
    };
    let opts: Vec<Option<&mut ModuleOptimizer<T>>> = match optimizer {
        Some(o) => o.modules_mut().iter_mut().map(Some).collect(),
        None => (0..depth).map(|_| None).collect(),
    };

    let start = Instant::now();
    let logs: Vec<WorkerLog<T>> = std::thread::scope(|s| {
        let handles: Vec<_> = net
            .modules
            .iter_mut()
            .zip(accs.iter_mut())
            .zip(opts)
            .enumerate()
            .map(|(i, ((module, acc), opt))| s.spawn(move || worker(shared, i, module, acc, opt)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panics are caught inside the loop"))
            .collect()
    });
    let total = start.elapsed();

    state.forward_slots = forward_mail.into_iter().map(|m| m.into_inner().unwrap()).collect();
    state.backward_slots = backward_mail.into_iter().map(|m| m.into_inner().unwrap()).collect();
    state.accumulators = accs;

    let mut per_step = Vec::new();
    let mut records = Vec::new();
    let mut losses = Vec::new();
    let mut outputs = Vec::new();
    for (i, log) in logs.into_iter().enumerate() {
        if i == 0 {
            per_step = log.per_step;
        }
        records.extend(log.records);
        losses.extend(log.losses);
        outputs.extend(log.outputs);
    }
    records.sort_by_key(|r| (r.step, r.module));
    let failed = abort.load(Ordering::SeqCst);
    let completed = per_step.len() - usize::from(failed);
    let last_full = state.current_step() + completed;
    if failed {
        records.retain(|r| r.step <= last_full);
        losses.retain(|l| l.step <= last_full);
    }
    state.absorb(last_full, records, losses, outputs);

    if failed {
        let mut failures = failures.into_inner().unwrap();
        let first = failures.remove(0);
        let source = match first {
            PipelineError::Invariant { step, source, trace } => PipelineError::Invariant {
                step,
                source,
                trace: format!("{}{trace}", state.trace().to_jsonl()),
            },
            other => other,
        };
        return Err(ExecutorError::Aborted {
            source,
            partial: Box::new(state.trace().clone()),
        });
    }
    Ok(Timing { total, per_step })
}

/// Runs one episode from a restarted pipeline and averages the accumulated
/// (pseudo-)gradients.
pub fn run_episode<T: Scalar>(
    cfg: &ExecutorConfig,
    net: &mut NetworkSpec<T>,
    episode: &Episode<T>,
    mode: Mode,
) -> Result<EpisodeRun<T>, ExecutorError> {
    let source = FrameSource::for_mode(mode);
    let mut state = PipelineState::new(net.depth(), source);
    restart(&mut state, net);
    let drain = match mode {
        Mode::Bp => Drain::Full,
        Mode::Sideways => cfg.drain,
    };
    let steps = source.total_steps(net.depth(), episode.len(), drain);
    let timing = drive(cfg, &mut state, net, episode, None, 0.0, steps)?;
    Ok(EpisodeRun {
        updates: finish_episode(&state),
        gammas: state.accumulators().iter().map(|a| a.gamma()).collect(),
        trace: state.into_trace(),
        timing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupReport {
    pub depth: usize,
    pub engine: Engine,
    pub cores: usize,
    pub load: Option<String>,
    pub n_steps: usize,
    pub repeats: usize,
    /// Completed update cycles per second under blocking BP.
    pub steps_per_sec_bp: f64,
    /// Completed update cycles per second under Sideways.
    pub steps_per_sec_sideways: f64,
    pub ratio: f64,
    /// Raw computation steps per second for each mode.
    pub compute_steps_per_sec_bp: f64,
    pub compute_steps_per_sec_sideways: f64,
    /// Time of one forward unit per module, including the artificial load.
    pub per_module_ms: Vec<f64>,
}

impl SpeedupReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const BENCH_REPEATS: usize = 3;

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn stream_episode<T: Scalar>(net: &NetworkSpec<T>, frames: usize, seed: u64) -> Episode<T> {
    let frames: Vec<Tensor<T>> = (0..frames)
        .map(|i| random_tensor(net.input_shape(), seed.wrapping_add(i as u64)).cast())
        .collect();
    let targets = match net.task {
        Task::Classification { .. } => Targets::Label(0),
        Task::Autoencoding => Targets::Frames,
    };
    Episode::new(frames, targets).expect("frames share the input shape")
}

/// Throughput of both modes over `n_steps` computation steps on a continuous
/// stream, best of [`BENCH_REPEATS`] runs each.
///
/// Throughput counts update cycles that completed (module 1 received a
/// gradient) per second of wall time.
pub fn bench_speedup<T: Scalar>(
    cfg: &ExecutorConfig,
    net: &NetworkSpec<T>,
    n_steps: usize,
) -> Result<SpeedupReport, ExecutorError> {
    cfg.validate(net.depth())?;
    let episode = stream_episode(net, n_steps, cfg.seed);
    let mut best = [(0.0f64, 0.0f64); 2];
    for (slot, mode) in [Mode::Bp, Mode::Sideways].into_iter().enumerate() {
        for _ in 0..BENCH_REPEATS {
            let mut net = net.clone();
            let mut state = PipelineState::new(net.depth(), FrameSource::for_mode(mode));
            restart(&mut state, &mut net);
            let timing = drive(cfg, &mut state, &mut net, &episode, None, 0.0, n_steps)?;
            let secs = timing.total.as_secs_f64().max(1e-9);
            let cycles = state.accumulators()[0].gamma() as f64;
            let rate = (cycles / secs, n_steps as f64 / secs);
            if rate.0 > best[slot].0 || best[slot].0 == 0.0 && rate.1 > best[slot].1 {
                best[slot] = rate;
            }
        }
    }
    let per_module_ms = net
        .modules
        .iter()
        .map(|m| {
            let x = random_tensor(m.input_shape(), cfg.seed).cast::<T>();
            let t = Instant::now();
            let _ = m.apply(&x);
            if let Some(load) = cfg.load {
                load.run();
            }
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let [(bp, bp_raw), (sw, sw_raw)] = best;
    Ok(SpeedupReport {
        depth: net.depth(),
        engine: cfg.engine,
        cores: available_cores(),
        load: cfg.load.map(|l| l.describe()),
        n_steps,
        repeats: BENCH_REPEATS,
        steps_per_sec_bp: bp,
        steps_per_sec_sideways: sw,
        ratio: if bp > 0.0 { sw / bp } else { f64::INFINITY },
        compute_steps_per_sec_bp: bp_raw,
        compute_steps_per_sec_sideways: sw_raw,
        per_module_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_simple_cnn;

    fn clip(k: usize, seed: u64) -> Episode<f64> {
        let frames = (0..k).map(|i| random_tensor(&[6, 6, 1], seed + i as u64)).collect();
        Episode::new(frames, Targets::Label(1)).unwrap()
    }

    #[test]
    fn engines_agree_bitwise() {
        let mut net = build_simple_cnn::<f64>(&[2, 3, 2], 3, [6, 6, 1], 4).unwrap();
        let ep = clip(7, 5);
        for mode in [Mode::Sideways, Mode::Bp] {
            let a = run_episode(&ExecutorConfig::simulator(), &mut net, &ep, mode).unwrap();
            let b = run_episode(&ExecutorConfig::parallel(4), &mut net, &ep, mode).unwrap();
            assert_eq!(a.updates, b.updates);
            assert_eq!(a.trace, b.trace);
            assert_eq!(a.gammas, b.gammas);
        }
    }

    #[test]
    fn parallel_bp_has_one_busy_module_per_step() {
        let mut net = build_simple_cnn::<f64>(&[2, 2, 2], 2, [6, 6, 1], 6).unwrap();
        let r = run_episode(&ExecutorConfig::parallel(4), &mut net, &clip(3, 7), Mode::Bp).unwrap();
        for t in 1..=r.trace.steps() {
            assert!(r.trace.step_records(t).filter(|x| x.busy()).count() <= 1);
        }
        assert_eq!(r.timing.per_step.len(), 3 * 7);
    }

    #[test]
    fn config_validation() {
        let net = build_simple_cnn::<f64>(&[2, 2], 2, [6, 6, 1], 8).unwrap();
        let mut cfg = ExecutorConfig::parallel(2);
        assert!(matches!(cfg.validate(net.depth()), Err(ExecutorError::Config(_))));
        cfg.workers = 0;
        assert!(cfg.validate(3).is_err());
        assert!(ExecutorConfig::parallel(3).validate(3).is_ok());
    }

    #[test]
    fn worker_panic_aborts_with_partial_trace() {
        let mut net = build_simple_cnn::<f64>(&[2, 2], 2, [6, 6, 1], 9).unwrap();
        for engine in [Engine::Simulator, Engine::Parallel] {
            let mut cfg = ExecutorConfig::parallel(3);
            cfg.engine = engine;
            cfg.inject_panic = Some(InjectedPanic { module: 2, step: 4 });
            let err = run_episode(&cfg, &mut net, &clip(5, 1), Mode::Sideways).unwrap_err();
            let ExecutorError::Aborted { source, partial } = err else {
                panic!("expected abort");
            };
            assert_eq!(source, PipelineError::WorkerPanic { module: 2, step: 4 });
            assert_eq!(partial.steps(), 3);
            assert_eq!(partial.records.len(), 9);
        }
    }

    #[test]
    fn calibrated_load_is_in_range() {
        let load = ArtificialLoad::calibrated(Duration::from_millis(2));
        let t = Instant::now();
        load.run();
        let ms = t.elapsed().as_secs_f64() * 1e3;
        assert!(ms > 0.2 && ms < 50.0, "{ms}");
    }

    #[test]
    fn single_module_bench_ratio_near_one() {
        use crate::network::{LayerSpec, NetworkLayout};
        let layout = NetworkLayout {
            task: Task::Classification { num_classes: 2 },
            input_shape: vec![4, 4, 1],
            modules: vec![vec![
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear {
                    inputs: 1,
                    outputs: 2,
                    bias: true,
                },
            ]],
        };
        let net = NetworkSpec::<f64>::initialized(&layout, 1).unwrap();
        let mut cfg = ExecutorConfig::parallel(1);
        cfg.load = Some(ArtificialLoad::Sleep(Duration::from_millis(1)));
        let r = bench_speedup(&cfg, &net, 20).unwrap();
        assert!((r.ratio - 1.0).abs() <= 0.1, "{}", r.ratio);
    }
}
