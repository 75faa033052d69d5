mod common;

use common::{
    constant_clip, expanded_pseudo_gradient, pipeline_vs_expanded, random_case, random_clip, simulate_blocking,
    simulate_streaming,
};
use proptest::prelude::*;
use sideways::config::RunConfig;
use sideways::data::{generate_clip, generate_labeled_clip, strided_clip, torus_pad, ClipMeta, Clip, SpriteSceneSpec};
use sideways::executor::{run_episode, ExecutorConfig};
use sideways::network::LossTarget;
use sideways::optimizer::{LrSchedule, OptimizerConfig, OptimizerState, Rule};
use sideways::pipeline::{
    restart, run_schedule, Drain, FrameSource, ModuleUpdate, PipelineState, Targets,
};
use sideways::tensor::relative_error;
use sideways::verify::{constant_clip_gap, random_tensor, tiny_classifier};
use sideways::{Mode, Tensor};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn schedule_matches_token_simulation(d in 1usize..=8, k in 1usize..=32) {
        let net = tiny_classifier(d, d as u64);
        let ep = random_clip(&[6, 6, 2], k, k as u64, Targets::Label(2));
        for (source, sim) in [
            (FrameSource::Streaming, simulate_streaming(d, k, k + 2 * (d - 1))),
            (FrameSource::Blocking, simulate_blocking(d, k, k * (2 * d - 1))),
        ] {
            let mut work = net.clone();
            let run = run_schedule(&mut work, &ep, source, Drain::Full, None).unwrap();
            prop_assert_eq!(run.trace.steps(), sim.len());
            for r in &run.trace.records {
                let s = sim[r.step - 1][r.module - 1];
                prop_assert_eq!((r.fwd_origin, r.bwd_origin, r.masked), (s.fwd, s.bwd, s.bwd.is_none()));
            }
            let busy_max = (1..=run.trace.steps())
                .map(|t| run.trace.step_records(t).filter(|r| r.busy()).count())
                .max()
                .unwrap();
            match source {
                FrameSource::Blocking => prop_assert_eq!(busy_max, 1),
                _ => prop_assert!(busy_max <= d),
            }
        }
    }

    #[test]
    fn pipeline_matches_expanded_rules(seed in 0u64..10_000, k in 1usize..=8) {
        let (net, ep) = random_case(seed, 4, k, random_clip);
        let err = pipeline_vs_expanded(&net, &ep);
        prop_assert!(err <= 1e-12, "error {err:e}");
    }

    #[test]
    fn constant_clips_reduce_to_bp(seed in 0u64..10_000, k in 1usize..=9) {
        let (net, ep) = random_case(seed, 5, k, constant_clip);
        let gap = constant_clip_gap(&net, &ep);
        prop_assert!(gap <= 1e-6, "gap {gap:e}");
    }

    #[test]
    fn top_module_is_exact(seed in 0u64..10_000, k in 1usize..=8) {
        let (net, ep) = random_case(seed, 5, k, random_clip);
        let d = net.depth();
        let mut work = net.clone();
        let mut state = PipelineState::new(d, FrameSource::Streaming);
        restart(&mut state, &mut work);
        for t in 1..=k + 2 * (d - 1) {
            let out = state.step(&mut work, &ep, None, 0.0).unwrap();
            let got = &out.step_grads[d - 1];
            let origin = (t + 1).checked_sub(d).filter(|&o| o >= 1 && o <= k);
            prop_assert_eq!(got.is_some(), origin.is_some());
            if let (Some(got), Some(o)) = (got, origin) {
                let (_, exact) = net.frame_gradient(ep.frame(o), ep.target(o)).unwrap();
                for (a, b) in got.iter().zip(&exact[d - 1]) {
                    prop_assert!(relative_error(a, b) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn aligned_module_backward_is_classical_bp(seed in 0u64..10_000) {
        let (mut net, ep) = random_case(seed, 5, 1, random_clip);
        let x = ep.frame(1).clone();
        let (_, exact) = net.frame_gradient(&x, ep.target(1)).unwrap();
        let mut h = x.clone();
        for (i, m) in net.modules.iter_mut().enumerate() {
            h = m.forward(h, 1).unwrap();
            prop_assert_eq!(m.cached_origin(), Some(1));
            prop_assert_eq!(i + 1, m.index());
        }
        let mut g = net.loss(&h, ep.target(1)).unwrap().1;
        for i in (0..net.depth()).rev() {
            let (pg, gx) = net.modules[i].backward(&g).unwrap();
            for (a, b) in pg.iter().zip(&exact[i]) {
                prop_assert_eq!(a, b);
            }
            g = gx;
        }
    }

    #[test]
    fn cache_holds_the_last_input(n in 1usize..12, seed in 0u64..1000) {
        let mut net = tiny_classifier(2, seed);
        let inputs: Vec<Tensor<f64>> = (0..n).map(|i| random_tensor(&[6, 6, 2], seed + i as u64)).collect();
        for (i, x) in inputs.iter().enumerate() {
            net.modules[0].forward(x.clone(), i + 1).unwrap();
        }
        let cache = net.modules[0].cache().unwrap();
        prop_assert_eq!(cache.origin, n);
        prop_assert_eq!(&cache.value, &inputs[n - 1]);
    }

    #[test]
    fn episodes_are_deterministic(seed in 0u64..10_000, k in 1usize..=6, bp in any::<bool>()) {
        let (mut net, ep) = random_case(seed, 5, k, random_clip);
        let mode = if bp { Mode::Bp } else { Mode::Sideways };
        let a = run_episode(&ExecutorConfig::simulator(), &mut net, &ep, mode).unwrap();
        let b = run_episode(&ExecutorConfig::simulator(), &mut net, &ep, mode).unwrap();
        prop_assert_eq!(a.updates, b.updates);
        prop_assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn no_update_markers_leave_parameters_alone(seed in 0u64..1000, k in 1usize..4) {
        let net = tiny_classifier(4, seed);
        let ep = random_clip(&[6, 6, 2], k, seed, Targets::Label(0));
        let mut work = net.clone();
        let run = run_schedule(&mut work, &ep, FrameSource::Streaming, Drain::None, None).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &work);
        opt.apply_update(&mut work, &run.updates, 10, 0).unwrap();
        for (i, u) in run.updates.iter().enumerate() {
            if matches!(u, ModuleUpdate::NoUpdate) {
                prop_assert_eq!(work.modules[i].params(), net.modules[i].params());
            } else {
                prop_assert_ne!(work.modules[i].params(), net.modules[i].params());
            }
        }
    }

    #[test]
    fn torus_padding_repeats_cyclically(k in 1usize..6, target in 1usize..20) {
        let frames = (0..k).map(|i| Tensor::full(&[1, 1, 1], i as f32)).collect();
        let clip = Clip::new(frames, None, ClipMeta::default()).unwrap();
        let padded = torus_pad(&clip, target);
        prop_assert_eq!(padded.len(), target);
        for (t, f) in padded.frames.iter().enumerate() {
            prop_assert_eq!(f.data()[0], (t % k) as f32);
        }
    }

    #[test]
    fn striding_keeps_clip_length(stride in 0usize..=6, k_out in 1usize..12, seed in 0u64..100) {
        let spec = SpriteSceneSpec::default();
        let source = generate_labeled_clip(&spec, 0, (stride + 1) * k_out, 16, 16, seed).unwrap();
        let out = strided_clip(&source, stride, k_out);
        prop_assert_eq!(out.len(), k_out);
        for (j, f) in out.frames.iter().enumerate() {
            prop_assert_eq!(f, &source.frames[j * (stride + 1)]);
        }
    }

    #[test]
    fn generator_is_deterministic(seed in any::<u64>(), delta in 0.0f64..3.0) {
        let spec = SpriteSceneSpec { delta, ..SpriteSceneSpec::default() };
        let a = generate_clip(&spec, 5, 12, 12, seed).unwrap();
        let b = generate_clip(&spec, 5, 12, 12, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn config_round_trips(
        seed in 0..=i64::MAX as u64,
        batch in 1usize..64,
        lr in 1e-6f64..1.0,
        channels in prop::collection::vec(1usize..64, 1..7),
        bp in any::<bool>(),
        decay in prop::option::of(1e-5f64..1e-1),
    ) {
        let mut c = RunConfig::default();
        c.seed = seed;
        c.batch_size = batch;
        c.optimizer.lr = lr;
        c.optimizer.weight_decay = decay.unwrap_or(0.0);
        c.network.channels = channels;
        c.mode = if bp { Mode::Bp } else { Mode::Sideways };
        let text = c.to_toml();
        prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }
}

#[test]
fn seeds_outside_the_toml_range_are_rejected() {
    let mut c = RunConfig::default();
    c.seed = u64::MAX;
    let err = c.validate().unwrap_err();
    assert!(err.to_string().contains("seed"), "{err}");
}

#[test]
fn smoothness_grows_with_delta() {
    let diff = |delta: f64| -> f64 {
        (0..24u64)
            .map(|seed| {
                let spec = SpriteSceneSpec {
                    delta,
                    ..SpriteSceneSpec::default()
                };
                generate_clip(&spec, 8, 24, 24, seed).unwrap().mean_interframe_diff()
            })
            .sum::<f64>()
    };
    let values: Vec<f64> = [0.0, 0.25, 1.0, 2.0, 4.0].into_iter().map(diff).collect();
    assert_eq!(values[0], 0.0);
    assert!(values.windows(2).all(|w| w[0] <= w[1]), "{values:?}");
    assert!(values[4] > values[2]);
}

#[test]
fn decoupled_weight_decay_shrinks_geometrically() {
    let mut net = tiny_classifier(2, 3);
    let start = net.clone();
    let config = OptimizerConfig {
        rule: Rule::Sgd,
        lr: 0.1,
        clip_value: Some(1.0),
        weight_decay: 0.01,
        schedule: LrSchedule::constant(),
    };
    let mut opt = OptimizerState::new(config, &net);
    let zeros: Vec<ModuleUpdate<f64>> = net
        .modules
        .iter()
        .map(|m| ModuleUpdate::Average(m.params().iter().map(|p| Tensor::zeros(p.shape())).collect()))
        .collect();
    for _ in 0..5 {
        opt.apply_update(&mut net, &zeros, 0, 0).unwrap();
    }
    let factor = (1.0f64 - 0.1 * 0.01).powi(5);
    for (m, s) in net.modules.iter().zip(&start.modules) {
        for (p, q) in m.params().iter().zip(s.params()) {
            assert!(relative_error(p, &q.map(|v| v * factor)) < 1e-12);
        }
    }
}

#[test]
fn parallel_engine_completes_under_stress() {
    for d in 1..=8 {
        let net = tiny_classifier(d, d as u64);
        for k in [1, 3, 17] {
            let ep = random_clip(&[6, 6, 2], k, k as u64, Targets::Label(1));
            for mode in [Mode::Sideways, Mode::Bp] {
                let mut a = net.clone();
                let mut b = net.clone();
                let x = run_episode(&ExecutorConfig::simulator(), &mut a, &ep, mode).unwrap();
                let y = run_episode(&ExecutorConfig::parallel(d), &mut b, &ep, mode).unwrap();
                assert_eq!(x.updates, y.updates);
                assert_eq!(x.trace, y.trace);
            }
        }
    }
}

#[test]
fn expanded_rule_masks_warmup() {
    let net = tiny_classifier(3, 1);
    let ep = random_clip(&[6, 6, 2], 4, 9, Targets::Label(0));
    assert!(expanded_pseudo_gradient(&net, &ep, 1, 4).is_none());
    assert!(expanded_pseudo_gradient(&net, &ep, 1, 5).is_some());
    assert!(expanded_pseudo_gradient(&net, &ep, 3, 3).is_some());
    let (_, exact) = net.frame_gradient(ep.frame(1), LossTarget::Label(0)).unwrap();
    let top = expanded_pseudo_gradient(&net, &ep, 3, 3).unwrap();
    for (a, b) in top.iter().zip(&exact[2]) {
        assert!(relative_error(a, b) <= 1e-12);
    }
}
