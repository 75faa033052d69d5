//! How far each module's pseudo-gradient strays from the exact per-frame
//! gradient, for slow and fast sprite motion.
//!
//! `cargo run --release --example gradient_noise`

use sideways::data::{generate_labeled_clip, SpriteSceneSpec};
use sideways::network::build_simple_cnn;
use sideways::pipeline::measure_gradient_noise;

fn main() {
    let net = build_simple_cnn::<f64>(&[4; 5], 4, [16, 16, 3], 0).expect("valid layout");
    for delta in [0.25, 1.0, 3.0] {
        let spec = SpriteSceneSpec {
            delta,
            ..SpriteSceneSpec::default()
        };
        let mut sums = vec![0.0; net.depth()];
        let clips = 8;
        for seed in 0..clips {
            let clip = generate_labeled_clip(&spec, seed as usize % 4, 16, 16, 16, seed).expect("scene fits");
            let report = measure_gradient_noise(&net, &clip.to_episode().expect("non-empty clip")).expect("runs");
            for (s, m) in sums.iter_mut().zip(report.mean_relative()) {
                *s += m / clips as f64;
            }
        }
        let cells: Vec<String> = sums.iter().map(|v| format!("{v:.3}")).collect();
        println!("delta {delta:<4}  relative noise by module: {}", cells.join("  "));
    }
}
