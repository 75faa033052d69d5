//! Online autoencoding of a frame stream that arrives one frame per step.
//! Sideways reconstructs every frame; blocking BP drops the frames that
//! arrive while it is busy and repeats its last output for them.
//!
//! `cargo run --release --example realtime_autoencode -- [seed]`

use sideways::commands::realtime_compare;
use sideways::config::RunConfig;

fn main() {
    let mut cfg = RunConfig::default();
    if let Some(s) = std::env::args().nth(1) {
        cfg.seed = s.parse().expect("seed");
    }
    let r = realtime_compare(&cfg, |_| {}).expect("comparison runs");
    println!("depth {}  stream {} frames  delta {}", r.depth, r.stream_length, r.delta);
    println!("frames BP dropped per stream: {} (expected {})", r.dropped_frames, r.expected_dropped);
    println!("updates: sideways {}  bp {}", r.sideways_updates, r.bp_updates);
    println!("held-out per-frame MSE: sideways {:.5}  bp {:.5}", r.sideways_mse, r.bp_mse);
}
