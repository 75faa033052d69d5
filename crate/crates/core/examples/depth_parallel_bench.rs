//! Throughput of both modes when every module runs on its own thread.
//!
//! Each unit of work gets an artificial load, either a sleep (the module is
//! waiting on an accelerator) or a busy loop (the module needs a core).
//! Sideways keeps every thread busy, so it gains roughly `D` times when
//! there is room to run the modules side by side.
//!
//! `cargo run --release --example depth_parallel_bench -- [sleep|spin] [max_depth]`

use std::time::Duration;

use sideways::commands::bench_network;
use sideways::executor::{available_cores, bench_speedup, ArtificialLoad, ExecutorConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let kind = args.next().unwrap_or_else(|| "sleep".into());
    let max_depth: usize = args.next().map_or(6, |d| d.parse().expect("depth"));
    let load = match kind.as_str() {
        "sleep" => ArtificialLoad::Sleep(Duration::from_millis(2)),
        "spin" => ArtificialLoad::calibrated(Duration::from_millis(2)),
        other => {
            eprintln!("unknown load `{other}` (expected sleep or spin)");
            std::process::exit(2);
        }
    };
    println!("{} cores, {kind} load", available_cores());
    println!("depth  bp cycles/s  sideways cycles/s  ratio");
    for depth in 2..=max_depth {
        let net = bench_network(depth, 0);
        let cfg = ExecutorConfig {
            load: Some(load),
            ..ExecutorConfig::parallel(depth)
        };
        let r = bench_speedup(&cfg, &net, 60).expect("bench runs");
        println!(
            "{depth:>5}  {:>11.1}  {:>17.1}  {:>5.2}",
            r.steps_per_sec_bp, r.steps_per_sec_sideways, r.ratio
        );
    }
}
