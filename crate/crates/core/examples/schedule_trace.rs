//! Prints which frame each module handles on every step, for Sideways and
//! for blocking BP.
//!
//! `cargo run --example schedule_trace -- [depth] [frames]`

use sideways::pipeline::{bp_episode, sideways_episode, Drain, Episode, StepTrace, Targets};
use sideways::verify::tiny_classifier;
use sideways::Tensor;

fn show(title: &str, trace: &StepTrace, depth: usize) {
    println!("{title}");
    print!("step ");
    for i in 1..=depth {
        print!("| module {i:<5}");
    }
    println!();
    for t in 1..=trace.steps() {
        print!("{t:>4} ");
        for i in 1..=depth {
            let r = trace.record(t, i).expect("every module has a record per step");
            let f = r.fwd_origin.map_or("-".to_string(), |o| o.to_string());
            let b = r.bwd_origin.map_or("-".to_string(), |o| o.to_string());
            print!("| f{f:<4} b{b:<5}");
        }
        println!();
    }
    println!();
}

fn main() {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let depth = args.next().unwrap_or(3).max(2);
    let frames = args.next().unwrap_or(5).max(1);

    let mut net = tiny_classifier(depth, 0);
    let shape = net.input_shape().to_vec();
    let clip: Vec<Tensor<f64>> = (0..frames).map(|i| Tensor::full(&shape, i as f64 * 0.1)).collect();
    let episode = Episode::new(clip, Targets::Label(0)).expect("frames share a shape");

    let side = sideways_episode(&mut net, &episode, Drain::Full).expect("episode runs");
    show(&format!("Sideways, D = {depth}, K = {frames}"), &side.trace, depth);
    println!("updates per module: {:?}\n", side.gammas);

    let bp = bp_episode(&mut net, &episode).expect("episode runs");
    show(&format!("BP, D = {depth}, K = {frames}"), &bp.trace, depth);
    println!("updates per module: {:?}", bp.gammas);
}
