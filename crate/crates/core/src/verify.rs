//! Reference computations used to check the fast paths: central finite
//! differences, per-layer VJP checks and an unrolled per-step transcription
//! of the Sideways update rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::network::{
    build_autoencoder, build_simple_cnn, task_loss, NetworkError, NetworkSpec,
    ParamGrads, KERNEL_SIZE,
};
use crate::pipeline::{
    bp_episode, finish_episode, restart, Drain, Episode, FrameSource, Mode, ModuleUpdate,
    PipelineState, StepTrace, Targets,
};
use crate::tensor::{self, relative_error, Padding, Scalar, Tensor};

/// Tensor with entries uniform in `[-1, 1)`, deterministic in `seed`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Central differences of `f` around `x` with step `h`.
pub fn finite_difference(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub fd_step: f64,
    pub layer_tolerance: f64,
    pub end_to_end_tolerance: f64,
    pub oracle_tolerance: f64,
    pub constant_clip_tolerance: f64,
    /// Largest depth and clip length of the unrolled-oracle sweep.
    pub max_depth: usize,
    pub max_frames: usize,
    /// Negates the VJP of the named layer kind (`conv`, `deconv`, `relu`,
    /// `pool`, `linear`, `xent`, `mse`).
    pub inject_sign_flip: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fd_step: 1e-5,
            layer_tolerance: 1e-6,
            end_to_end_tolerance: 1e-5,
            oracle_tolerance: 1e-12,
            constant_clip_tolerance: 1e-6,
            max_depth: 3,
            max_frames: 6,
            inject_sign_flip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: impl Into<String>, error: f64, tolerance: f64) {
        self.checks.push(CheckResult {
            name: name.into(),
            error,
            tolerance,
            passed: error.is_finite() && error <= tolerance,
        });
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<40} err={:.3e} tol={:.0e}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.error,
                c.tolerance
            ));
        }
        out
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.dot(b).expect("same shapes")
}

/// Checks `vjp` against finite differences of `<u, f(args)>` for every argument.
fn check_vjp(
    report: &mut GradcheckReport,
    cfg: &GradcheckConfig,
    layer: &str,
    label: &str,
    args: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    vjp: impl Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
    seed: u64,
) {
    let out = f(args);
    let u = random_tensor(out.shape(), seed);
    let mut grads = vjp(args, &u);
    if cfg.inject_sign_flip.as_deref() == Some(layer) {
        grads.iter_mut().for_each(|g| g.scale(-1.0));
    }
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let fd = finite_difference(&args[k], cfg.fd_step, |x| {
            let mut a = args.to_vec();
            a[k] = x.clone();
            dot(&u, &f(&a))
        });
        worst = worst.max(relative_error(g, &fd));
    }
    report.push(format!("layer {layer} ({label})"), worst, cfg.layer_tolerance);
}

fn layer_checks(report: &mut GradcheckReport, cfg: &GradcheckConfig) {
    let s = cfg.seed * 1000;
    let ks = KERNEL_SIZE;
    for (label, stride, padding, h) in [
        ("stride 1, same", 1, Padding::Same, 5),
        ("stride 2, same", 2, Padding::Same, 6),
        ("stride 2, valid", 2, Padding::Valid, 7),
    ] {
        let args = [random_tensor(&[h, h, 2], s + 1), random_tensor(&[ks, ks, 2, 3], s + 2)];
        check_vjp(
            report,
            cfg,
            "conv",
            label,
            &args,
            |a| tensor::conv2d_forward(&a[0], &a[1], stride, padding).unwrap(),
            |a, u| {
                let (gx, gk) = tensor::conv2d_vjp(&a[0], &a[1], u, stride, padding, true).unwrap();
                vec![gx.unwrap(), gk]
            },
            s + 3,
        );
        let args = [random_tensor(&[3, 3, 3], s + 4), random_tensor(&[ks, ks, 3, 2], s + 5)];
        check_vjp(
            report,
            cfg,
            "deconv",
            label,
            &args,
            |a| tensor::deconv2d_forward(&a[0], &a[1], stride, padding).unwrap(),
            |a, u| {
                let (gx, gk) = tensor::deconv2d_vjp(&a[0], &a[1], u, stride, padding, true).unwrap();
                vec![gx.unwrap(), gk]
            },
            s + 6,
        );
    }
    check_vjp(
        report,
        cfg,
        "relu",
        "elementwise",
        &[random_tensor(&[4, 4, 3], s + 7)],
        |a| tensor::relu_forward(&a[0]),
        |a, u| vec![tensor::relu_vjp(&a[0], u).unwrap()],
        s + 8,
    );
    check_vjp(
        report,
        cfg,
        "pool",
        "global average",
        &[random_tensor(&[3, 4, 5], s + 9)],
        |a| tensor::global_avg_pool_forward(&a[0]).unwrap(),
        |a, u| vec![tensor::global_avg_pool_vjp(a[0].shape(), u).unwrap()],
        s + 10,
    );
    check_vjp(
        report,
        cfg,
        "linear",
        "with bias",
        &[
            random_tensor(&[6], s + 11),
            random_tensor(&[6, 4], s + 12),
            random_tensor(&[4], s + 13),
        ],
        |a| tensor::linear_forward(&a[0], &a[1], Some(&a[2])).unwrap(),
        |a, u| {
            let (gx, gw, gb) = tensor::linear_vjp(&a[0], &a[1], Some(&a[2]), u).unwrap();
            vec![gx, gw, gb.unwrap()]
        },
        s + 14,
    );
    check_vjp(
        report,
        cfg,
        "xent",
        "softmax cross-entropy",
        &[random_tensor(&[5], s + 15)],
        |a| Tensor::full(&[1], tensor::softmax_xent(&a[0], 2).unwrap().0),
        |a, u| {
            let (_, mut g) = tensor::softmax_xent(&a[0], 2).unwrap();
            g.scale(u.data()[0]);
            vec![g]
        },
        s + 16,
    );
    let target = random_tensor(&[3, 3, 2], s + 17);
    check_vjp(
        report,
        cfg,
        "mse",
        "mean squared error",
        &[random_tensor(&[3, 3, 2], s + 18)],
        |a| Tensor::full(&[1], tensor::mse(&a[0], &target).unwrap().0),
        |a, u| {
            let (_, mut g) = tensor::mse(&a[0], &target).unwrap();
            g.scale(u.data()[0]);
            vec![g]
        },
        s + 19,
    );
}

/// Worst relative error between `bp_episode` and finite differences of the
/// clip-averaged loss, over every parameter tensor.
pub fn bp_vs_finite_differences(net: &NetworkSpec<f64>, episode: &Episode<f64>, h: f64) -> f64 {
    let mut work = net.clone();
    let result = bp_episode(&mut work, episode).expect("tiny net runs");
    let clip_loss = |n: &NetworkSpec<f64>| -> f64 {
        (1..=episode.len())
            .map(|o| {
                let y = n.predict(episode.frame(o)).unwrap();
                n.loss(&y, episode.target(o)).unwrap().0
            })
            .sum::<f64>()
            / episode.len() as f64
    };
    let mut worst = 0.0f64;
    for (i, update) in result.updates.iter().enumerate() {
        let grads = update.grads().expect("bp reaches every module");
        for (p, g) in grads.iter().enumerate() {
            let fd = finite_difference(&net.modules[i].params()[p], h, |w| {
                let mut n = net.clone();
                n.modules[i].params_mut()[p] = w.clone();
                clip_loss(&n)
            });
            worst = worst.max(relative_error(g, &fd));
        }
    }
    worst
}

/// Per-step parameter pseudo-gradients and their masked averages, computed
/// without pipeline state.
#[derive(Debug, Clone)]
pub struct UnrolledSideways<T> {
    /// `per_step[t - 1][i - 1]` is `∇̃^t_{θ_i}`, `None` where masked.
    pub per_step: Vec<Vec<Option<ParamGrads<T>>>>,
    pub averages: Vec<ModuleUpdate<T>>,
}

struct Unroller<'a, T> {
    net: &'a NetworkSpec<T>,
    episode: &'a Episode<T>,
}

impl<T: Scalar> Unroller<'_, T> {
    /// `h_i` for frame `origin`, recomputed from the input (`i = 0` is the frame).
    fn activation(&self, i: usize, origin: usize) -> Tensor<T> {
        let mut h = self.episode.frame(origin).clone();
        for m in &self.net.modules[..i] {
            h = m.apply(&h).expect("shapes validated");
        }
        h
    }

    /// Origin of the activation module `i` holds at step `t`. Module `i`
    /// receives frame `t - i + 1` at step `t` and keeps its last input once
    /// the clip has ended.
    fn held_origin(&self, i: usize, t: usize) -> Option<usize> {
        let o = (t + 1).checked_sub(i).filter(|&o| o >= 1)?;
        Some(o.min(self.episode.len()))
    }

    /// `∇̃^t_{h_i}`, the pseudo-gradient arriving at module `i` for its step-`t` backward.
    fn upstream(&self, i: usize, t: usize) -> Option<Tensor<T>> {
        let d = self.net.depth();
        if i == d {
            let o = (t + 1).checked_sub(d).filter(|&o| o >= 1 && o <= self.episode.len())?;
            let h = self.activation(d, o);
            return Some(task_loss(self.net.task, &h, self.episode.target(o)).unwrap().1);
        }
        let u = self.upstream(i + 1, t.checked_sub(1)?)?;
        let c = self.held_origin(i + 1, t - 1)?;
        let x = self.activation(i, c);
        let (_, gx) = self.net.modules[i].vjp_at(&x, &u, true).unwrap();
        gx
    }

    fn param_grad(&self, i: usize, t: usize) -> Option<ParamGrads<T>> {
        let u = self.upstream(i, t)?;
        let c = self.held_origin(i, t)?;
        let x = self.activation(i - 1, c);
        Some(self.net.modules[i - 1].vjp_at(&x, &u, false).unwrap().0)
    }
}

/// Literal per-step evaluation of the Sideways rules with a full drain.
pub fn unrolled_sideways<T: Scalar>(net: &NetworkSpec<T>, episode: &Episode<T>) -> UnrolledSideways<T> {
    let un = Unroller { net, episode };
    let d = net.depth();
    let steps = episode.len() + 2 * (d - 1);
    let per_step: Vec<Vec<Option<ParamGrads<T>>>> = (1..=steps)
        .map(|t| (1..=d).map(|i| un.param_grad(i, t)).collect())
        .collect();
    let averages = (0..d)
        .map(|i| {
            let present: Vec<&ParamGrads<T>> = per_step.iter().filter_map(|s| s[i].as_ref()).collect();
            if present.is_empty() {
                return ModuleUpdate::NoUpdate;
            }
            let mut sum = present[0].clone();
            for g in &present[1..] {
                for (a, b) in sum.iter_mut().zip(g.iter()) {
                    a.add_assign(b).unwrap();
                }
            }
            let n = T::from_f64(present.len() as f64);
            ModuleUpdate::Average(sum.iter().map(|t| t.map(|v| v / n)).collect())
        })
        .collect();
    UnrolledSideways { per_step, averages }
}

/// Largest relative error between the pipelined Sideways run and the unrolled
/// rules, over every step, module and parameter tensor. Infinite if the masks
/// disagree.
pub fn pipeline_vs_unrolled(net: &NetworkSpec<f64>, episode: &Episode<f64>) -> Result<f64, NetworkError> {
    let oracle = unrolled_sideways(net, episode);
    let mut work = net.clone();
    let mut state = PipelineState::new(net.depth(), FrameSource::Streaming);
    restart(&mut state, &mut work);
    let mut worst = 0.0f64;
    let steps = FrameSource::Streaming.total_steps(net.depth(), episode.len(), Drain::Full);
    for t in 0..steps {
        let out = state.step(&mut work, episode, None, 0.0).map_err(|e| match e {
            crate::pipeline::PipelineError::Network(n) => n,
            other => NetworkError::Architecture(other.to_string()),
        })?;
        for (a, b) in out.step_grads.iter().zip(&oracle.per_step[t]) {
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter().zip(b) {
                        worst = worst.max(relative_error(x, y));
                    }
                }
                _ => return Ok(f64::INFINITY),
            }
        }
    }
    for (a, b) in finish_episode(&state).iter().zip(&oracle.averages) {
        match (a.grads(), b.grads()) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                for (x, y) in a.iter().zip(b) {
                    worst = worst.max(relative_error(x, y));
                }
            }
            _ => return Ok(f64::INFINITY),
        }
    }
    Ok(worst)
}

fn random_clip(shape: &[usize], k: usize, seed: u64, targets: Targets) -> Episode<f64> {
    let frames = (0..k).map(|i| random_tensor(shape, seed + i as u64)).collect();
    Episode::new(frames, targets).expect("frames share a shape")
}

fn constant_clip(shape: &[usize], k: usize, seed: u64, targets: Targets) -> Episode<f64> {
    Episode::new(vec![random_tensor(shape, seed); k], targets).expect("frames share a shape")
}

/// Worst relative error between Sideways averages and BP averages on a clip
/// of identical frames.
pub fn constant_clip_gap(net: &NetworkSpec<f64>, episode: &Episode<f64>) -> f64 {
    let mut a = net.clone();
    let mut b = net.clone();
    let sw = crate::pipeline::sideways_episode(&mut a, episode, Drain::Full).expect("tiny net runs");
    let bp = bp_episode(&mut b, episode).expect("tiny net runs");
    let mut worst = 0.0f64;
    for (x, y) in sw.updates.iter().zip(&bp.updates) {
        match (x.grads(), y.grads()) {
            (Some(x), Some(y)) => {
                for (p, q) in x.iter().zip(y) {
                    worst = worst.max(relative_error(p, q));
                }
            }
            _ => return f64::INFINITY,
        }
    }
    worst
}

/// The tiny classification net used by the suite: three modules on 6x6x2 frames.
pub fn tiny_classifier(depth: usize, seed: u64) -> NetworkSpec<f64> {
    let channels = vec![2; depth.saturating_sub(1)];
    if channels.is_empty() {
        let layout = crate::network::NetworkLayout {
            task: crate::network::Task::Classification { num_classes: 3 },
            input_shape: vec![6, 6, 2],
            modules: vec![vec![
                crate::network::LayerSpec::GlobalAvgPool,
                crate::network::LayerSpec::Linear {
                    inputs: 2,
                    outputs: 3,
                    bias: true,
                },
            ]],
        };
        return NetworkSpec::initialized(&layout, seed).expect("valid layout");
    }
    build_simple_cnn(&channels, 3, [6, 6, 2], seed).expect("valid layout")
}

/// Runs every check: per-layer VJPs, end-to-end BP, the unrolled-oracle sweep
/// and the constant-clip limit.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> GradcheckReport {
    let mut report = GradcheckReport::default();
    layer_checks(&mut report, cfg);

    let net = tiny_classifier(3, cfg.seed);
    debug_assert!(net.param_count() <= 1000);
    let ep = random_clip(&[6, 6, 2], 3, cfg.seed + 50, Targets::Label(1));
    report.push(
        "bp_episode classifier",
        bp_vs_finite_differences(&net, &ep, cfg.fd_step),
        cfg.end_to_end_tolerance,
    );
    let ae = build_autoencoder::<f64>(&[2, 2], [4, 4, 1], cfg.seed).expect("valid layout");
    let ep = random_clip(&[4, 4, 1], 2, cfg.seed + 60, Targets::Frames);
    report.push(
        "bp_episode autoencoder",
        bp_vs_finite_differences(&ae, &ep, cfg.fd_step),
        cfg.end_to_end_tolerance,
    );

    for d in 1..=cfg.max_depth {
        let net = tiny_classifier(d, cfg.seed + d as u64);
        for k in 1..=cfg.max_frames {
            let ep = random_clip(&[6, 6, 2], k, cfg.seed * 97 + (d * 10 + k) as u64, Targets::Label(k % 3));
            let err = pipeline_vs_unrolled(&net, &ep).unwrap_or(f64::INFINITY);
            report.push(format!("unrolled oracle D={d} K={k}"), err, cfg.oracle_tolerance);
        }
    }

    let net = tiny_classifier(3, cfg.seed + 7);
    let ep = constant_clip(&[6, 6, 2], 5, cfg.seed + 70, Targets::Label(0));
    report.push(
        "constant clip sideways == bp",
        constant_clip_gap(&net, &ep),
        cfg.constant_clip_tolerance,
    );
    report
}

/// Differences between a trace and the closed-form schedule of `mode` for a
/// depth-`depth` network on a `frames`-frame clip run with a full drain.
pub fn schedule_violations(trace: &StepTrace, depth: usize, frames: usize, mode: Mode) -> Vec<String> {
    let mut out = Vec::new();
    let source = FrameSource::for_mode(mode);
    let steps = source.total_steps(depth, frames, Drain::Full);
    if trace.steps() != steps {
        out.push(format!("expected {steps} steps, trace has {}", trace.steps()));
    }
    if trace.records.len() != steps * depth {
        out.push(format!("expected {} records, got {}", steps * depth, trace.records.len()));
    }
    let period = crate::pipeline::cycle_length(depth);
    for r in &trace.records {
        let (t, i) = (r.step, r.module);
        let expect_fwd = match mode {
            Mode::Sideways => (t + 1).checked_sub(i).filter(|&o| o >= 1 && o <= frames),
            Mode::Bp => {
                let n = (t - 1) / period + 1;
                let offset = (t - 1) % period + 1;
                (offset == i && n <= frames).then_some(n)
            }
        };
        if r.fwd_origin != expect_fwd {
            out.push(format!("step {t} module {i}: forward origin {:?}, expected {expect_fwd:?}", r.fwd_origin));
        }
        let expect_bwd = match mode {
            Mode::Sideways => (t + 1)
                .checked_sub(2 * depth - i)
                .filter(|&o| o >= 1 && o <= frames),
            Mode::Bp => {
                let n = (t - 1) / period + 1;
                let offset = (t - 1) % period + 1;
                (offset == 2 * depth - i && n <= frames).then_some(n)
            }
        };
        if r.bwd_origin != expect_bwd {
            out.push(format!("step {t} module {i}: backward origin {:?}, expected {expect_bwd:?}", r.bwd_origin));
        }
        if r.masked != expect_bwd.is_none() {
            out.push(format!("step {t} module {i}: mask {}", r.masked));
        }
    }
    for l in &trace.losses {
        let expect = match mode {
            Mode::Sideways => (l.step + 1).checked_sub(depth),
            Mode::Bp => Some((l.step - 1) / period + 1),
        };
        if Some(l.origin) != expect {
            out.push(format!("loss at step {} paired with frame {}, expected {expect:?}", l.step, l.origin));
        }
    }
    if trace.losses.len() != frames {
        out.push(format!("{} loss events for {frames} frames", trace.losses.len()));
    }
    if mode == Mode::Bp {
        for t in 1..=trace.steps() {
            if trace.step_records(t).filter(|r| r.busy()).count() > 1 {
                out.push(format!("step {t}: more than one busy module under blocking"));
            }
        }
    }
    out
}
