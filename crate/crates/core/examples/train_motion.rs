//! Trains a small CNN to classify sprite motion direction, with either
//! Sideways or BP, and reports the rolling training accuracy.
//!
//! `cargo run --release --example train_motion -- [sideways|bp] [iterations]`

use sideways::commands::train;
use sideways::config::RunConfig;
use sideways::Mode;

fn main() {
    let mut args = std::env::args().skip(1);
    let mode: Mode = args.next().as_deref().unwrap_or("sideways").parse().unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(2);
    });
    let mut cfg = RunConfig::desk();
    cfg.mode = mode;
    if let Some(n) = args.next() {
        cfg.max_iterations = Some(n.parse().expect("iteration count"));
    }
    println!(
        "{} on {}x{} clips of {} frames, D = {}",
        mode.name(),
        cfg.network.height,
        cfg.network.width,
        cfg.data.clip_length,
        cfg.depth()
    );

    let out = train::<f32>(&cfg, |row| {
        if row.iteration % 25 == 0 {
            println!(
                "iter {:>4}  loss {:.4}  batch acc {:.2}  lr {:.2e}",
                row.iteration, row.loss, row.metric, row.lr
            );
        }
    })
    .expect("training runs");

    if let Some(acc) = out.rolling_accuracy {
        println!("rolling accuracy {acc:.3}");
    }
    match out.reached_target_at {
        Some(it) => println!("target accuracy reached at iteration {it}"),
        None => println!("target accuracy not reached"),
    }
}
