//! Trains briefly, saves a checkpoint, and reloads it at both precisions.
//!
//! `cargo run --release --example checkpoint`

use sideways::checkpoint::{read_checkpoint, write_checkpoint};
use sideways::commands::train;
use sideways::config::RunConfig;
use sideways::NetworkSpec;

fn main() {
    let mut cfg = RunConfig::desk();
    cfg.max_iterations = Some(20);
    let mut trained = train::<f32>(&cfg, |_| {}).expect("training runs").net;
    trained.clear_caches();

    let path = std::env::temp_dir().join("sideways-example-checkpoint.bin");
    write_checkpoint(&path, &trained).expect("write");
    let same: NetworkSpec<f32> = read_checkpoint(&path).expect("read");
    let wide: NetworkSpec<f64> = read_checkpoint(&path).expect("read as f64");
    println!("{} parameters in {} modules", same.param_count(), same.depth());
    println!("reloaded exactly: {}", same == trained);
    println!("widened to f64 then narrowed back unchanged: {}", wide.cast::<f32>() == trained);
}
