#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sideways::network::{autoencoder_layout, simple_cnn_layout, NetworkSpec};
use sideways::pipeline::{finish_episode, restart, Episode, FrameSource, PipelineState, Targets};
use sideways::tensor::relative_error;
use sideways::verify::random_tensor;
use sideways::Tensor;

/// What one module did on one step according to a token-passing simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Slot {
    pub fwd: Option<usize>,
    pub bwd: Option<usize>,
}

/// Moves frame tokens through a depth-`d` stack one module per step. A token
/// reaching the top turns around in the same step and walks back down.
/// `admit(t)` says which frame, if any, enters module 1 on step `t`.
///
/// Returns `grid[t - 1][i - 1]`.
pub fn simulate(d: usize, steps: usize, mut admit: impl FnMut(usize, &[Vec<Slot>]) -> Option<usize>) -> Vec<Vec<Slot>> {
    let mut grid: Vec<Vec<Slot>> = Vec::with_capacity(steps);
    for t in 1..=steps {
        let mut row = vec![Slot::default(); d];
        row[0].fwd = admit(t, &grid);
        if let Some(prev) = grid.last() {
            for i in 1..d {
                row[i].fwd = prev[i - 1].fwd;
            }
            for i in 0..d - 1 {
                row[i].bwd = prev[i + 1].bwd;
            }
        }
        row[d - 1].bwd = row[d - 1].fwd;
        grid.push(row);
    }
    grid
}

/// Sideways: a new frame on every step while frames last.
pub fn simulate_streaming(d: usize, k: usize, steps: usize) -> Vec<Vec<Slot>> {
    simulate(d, steps, |t, _| (t <= k).then_some(t))
}

/// Blocking BP: the next frame enters only once every token has left the stack.
pub fn simulate_blocking(d: usize, k: usize, steps: usize) -> Vec<Vec<Slot>> {
    let mut next = 1;
    simulate(d, steps, |_, grid| {
        let idle = match grid.last() {
            None => true,
            Some(prev) => {
                let moving_up = prev[..d - 1].iter().any(|s| s.fwd.is_some());
                let moving_down = prev[1..].iter().any(|s| s.bwd.is_some());
                !moving_up && !moving_down
            }
        };
        if idle && next <= k {
            next += 1;
            Some(next - 1)
        } else {
            None
        }
    })
}

/// Frames a blocking learner drops from a real-time stream: every frame that
/// arrives while a previous one is still inside its update cycle.
pub fn dropped_frames(d: usize, n: usize) -> usize {
    let mut busy_until = 0;
    let mut dropped = 0;
    for t in 1..=n {
        if t <= busy_until {
            dropped += 1;
        } else {
            busy_until = t + 2 * (d - 1);
        }
    }
    dropped
}

pub fn random_clip(shape: &[usize], k: usize, seed: u64, targets: Targets) -> Episode<f64> {
    let frames = (0..k).map(|i| random_tensor(shape, seed.wrapping_mul(131) + i as u64)).collect();
    Episode::new(frames, targets).unwrap()
}

pub fn constant_clip(shape: &[usize], k: usize, seed: u64, targets: Targets) -> Episode<f64> {
    Episode::new(vec![random_tensor(shape, seed); k], targets).unwrap()
}

/// A random small classifier or autoencoder of depth 2..=`max_depth`, and a
/// matching episode of `k` frames built by `clip`.
pub fn random_case(
    seed: u64,
    max_depth: usize,
    k: usize,
    clip: fn(&[usize], usize, u64, Targets) -> Episode<f64>,
) -> (NetworkSpec<f64>, Episode<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(2..=max_depth);
    let channels: Vec<usize> = (1..depth).map(|_| rng.gen_range(1..=3)).collect();
    let cin = rng.gen_range(1..=2);
    if rng.gen_bool(0.7) {
        let side = rng.gen_range(4..=7);
        let shape = [side, side, cin];
        let classes = rng.gen_range(2..=4);
        let layout = simple_cnn_layout(&channels, classes, shape).unwrap();
        let net = NetworkSpec::initialized(&layout, seed).unwrap();
        let ep = clip(&shape, k, seed + 1, Targets::Label(rng.gen_range(0..classes)));
        (net, ep)
    } else {
        let side = if depth < 6 && rng.gen_bool(0.5) { 4 } else { 8 };
        let shape = [side, side, cin];
        let layout = autoencoder_layout(&channels, shape).unwrap();
        let net = NetworkSpec::initialized(&layout, seed).unwrap();
        let ep = clip(&shape, k, seed + 1, Targets::Frames);
        (net, ep)
    }
}

/// Input of module `j` (1-based) for frame `origin`, by direct composition.
fn input_of(net: &NetworkSpec<f64>, ep: &Episode<f64>, j: usize, origin: usize) -> Tensor<f64> {
    let mut h = ep.frame(origin).clone();
    for m in &net.modules[..j - 1] {
        h = m.apply(&h).unwrap();
    }
    h
}

/// Pseudo-gradient of module `i` at step `t` from the expanded product
///
/// `∇L(h_D^{t_i-D+1}) · J H_D(h_{D-1}^{t_i-D+1}) · J H_{D-1}(h_{D-2}^{t_i-D+3}) ⋯ J_θ H_i(h_{i-1}^{t-i+1})`
///
/// with `t_i = t + i - D`: the factor of module `j` is evaluated at the input
/// of origin `t + i - 2j + 1`. After the last frame a module keeps its last
/// input, so origins past `K` read frame `K`. `None` where no loss reaches.
pub fn expanded_pseudo_gradient(net: &NetworkSpec<f64>, ep: &Episode<f64>, i: usize, t: usize) -> Option<Vec<Tensor<f64>>> {
    let d = net.depth();
    let k = ep.len();
    let loss_origin = (t + i + 1).checked_sub(2 * d).filter(|&o| o >= 1 && o <= k)?;
    let origin_at = |j: usize| (t + i + 1 - 2 * j).min(k);
    let top = net.predict(ep.frame(loss_origin)).unwrap();
    let mut g = net.loss(&top, ep.target(loss_origin)).unwrap().1;
    for j in (i + 1..=d).rev() {
        let x = input_of(net, ep, j, origin_at(j));
        g = net.modules[j - 1].vjp_at(&x, &g, true).unwrap().1.unwrap();
    }
    let x = input_of(net, ep, i, origin_at(i));
    Some(net.modules[i - 1].vjp_at(&x, &g, false).unwrap().0)
}

/// Worst relative error between the pipelined Sideways run and
/// [`expanded_pseudo_gradient`], per step and for the masked averages.
/// Infinite if the two disagree on where a gradient exists.
pub fn pipeline_vs_expanded(net: &NetworkSpec<f64>, ep: &Episode<f64>) -> f64 {
    let d = net.depth();
    let steps = ep.len() + 2 * (d - 1);
    let mut work = net.clone();
    let mut state = PipelineState::new(d, FrameSource::Streaming);
    restart(&mut state, &mut work);
    let mut worst = 0.0f64;
    let mut sums: Vec<Option<Vec<Tensor<f64>>>> = vec![None; d];
    let mut counts = vec![0usize; d];
    for t in 1..=steps {
        let out = state.step(&mut work, ep, None, 0.0).unwrap();
        for i in 1..=d {
            match (&out.step_grads[i - 1], expanded_pseudo_gradient(net, ep, i, t)) {
                (None, None) => {}
                (Some(got), Some(want)) => {
                    for (a, b) in got.iter().zip(&want) {
                        worst = worst.max(relative_error(a, b));
                    }
                    counts[i - 1] += 1;
                    match &mut sums[i - 1] {
                        None => sums[i - 1] = Some(want),
                        Some(s) => {
                            for (acc, w) in s.iter_mut().zip(&want) {
                                acc.add_assign(w).unwrap();
                            }
                        }
                    }
                }
                _ => return f64::INFINITY,
            }
        }
    }
    for (i, u) in finish_episode(&state).iter().enumerate() {
        match (u.grads(), &sums[i]) {
            (None, None) => {}
            (Some(got), Some(sum)) => {
                for (a, s) in got.iter().zip(sum) {
                    worst = worst.max(relative_error(a, &s.map(|v| v / counts[i] as f64)));
                }
            }
            _ => return f64::INFINITY,
        }
    }
    worst
}
