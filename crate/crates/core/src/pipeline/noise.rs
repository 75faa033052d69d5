use serde::Serialize;

use crate::network::{NetworkSpec, ParamGrads};
use crate::tensor::Scalar;

use super::{restart, Drain, Episode, FrameSource, PipelineState, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleNoise {
    pub module: usize,
    /// Mean of `‖ε‖ / ‖∇‖` over the steps where the module had a pseudo-gradient.
    pub mean_relative: f64,
    pub max_relative: f64,
    /// Largest absolute entry of any `ε`.
    pub max_abs: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseReport {
    pub modules: Vec<ModuleNoise>,
}

impl NoiseReport {
    pub fn mean_relative(&self) -> Vec<f64> {
        self.modules.iter().map(|m| m.mean_relative).collect()
    }
}

fn norm<T: Scalar>(g: &ParamGrads<T>) -> f64 {
    g.iter()
        .flat_map(|t| t.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Compares every per-step pseudo-gradient with the exact gradient of the
/// loss on the frame it originated from. Parameters stay fixed.
pub fn measure_gradient_noise<T: Scalar>(net: &NetworkSpec<T>, episode: &Episode<T>) -> Result<NoiseReport> {
    let depth = net.depth();
    let exact: Vec<Vec<ParamGrads<T>>> = (1..=episode.len())
        .map(|o| net.frame_gradient(episode.frame(o), episode.target(o)).map(|(_, g)| g))
        .collect::<std::result::Result<_, _>>()?;

    let mut net = net.clone();
    let mut state = PipelineState::new(depth, FrameSource::Streaming);
    restart(&mut state, &mut net);
    let mut rel = vec![Vec::new(); depth];
    let mut max_abs = vec![0.0f64; depth];
    for _ in 0..FrameSource::Streaming.total_steps(depth, episode.len(), Drain::Full) {
        let out = state.step(&mut net, episode, None, 0.0)?;
        for (i, (grads, record)) in out.step_grads.iter().zip(&out.records).enumerate() {
            let (Some(grads), Some(origin)) = (grads, record.bwd_origin) else {
                continue;
            };
            let truth = &exact[origin - 1][i];
            let mut eps_sq = 0.0;
            for (g, e) in grads.iter().zip(truth) {
                for (a, b) in g.data().iter().zip(e.data()) {
                    let d = (*a - *b).as_f64();
                    eps_sq += d * d;
                    max_abs[i] = max_abs[i].max(d.abs());
                }
            }
            let denom = norm(truth);
            let r = if denom > 0.0 {
                eps_sq.sqrt() / denom
            } else {
                eps_sq.sqrt()
            };
            rel[i].push(r);
        }
    }
    let modules = rel
        .into_iter()
        .zip(max_abs)
        .enumerate()
        .map(|(i, (r, max_abs))| ModuleNoise {
            module: i + 1,
            mean_relative: r.iter().sum::<f64>() / r.len().max(1) as f64,
            max_relative: r.iter().copied().fold(0.0, f64::max),
            max_abs,
            samples: r.len(),
        })
        .collect();
    Ok(NoiseReport { modules })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_simple_cnn;
    use crate::pipeline::Targets;
    use crate::verify::random_tensor;

    #[test]
    fn constant_clip_has_no_noise() {
        let net = build_simple_cnn::<f64>(&[3, 3, 3], 3, [6, 6, 2], 1).unwrap();
        let f = random_tensor(&[6, 6, 2], 2);
        let ep = Episode::new(vec![f; 8], Targets::Label(2)).unwrap();
        let report = measure_gradient_noise(&net, &ep).unwrap();
        for m in &report.modules {
            assert!(m.max_relative <= 1e-12, "{m:?}");
            assert!(m.samples > 0);
        }
    }

    #[test]
    fn top_module_is_exact_on_random_clip() {
        let net = build_simple_cnn::<f64>(&[3, 3], 3, [6, 6, 2], 3).unwrap();
        let frames = (0..7).map(|i| random_tensor(&[6, 6, 2], 10 + i)).collect();
        let ep = Episode::new(frames, Targets::Label(0)).unwrap();
        let report = measure_gradient_noise(&net, &ep).unwrap();
        let top = report.modules.last().unwrap();
        assert_eq!(top.max_abs, 0.0);
        assert_eq!(top.samples, 7);
        assert!(report.modules[0].mean_relative > 0.0);
    }
}
