//! Finite-difference checks of every layer, end-to-end BP, and the pipelined
//! pseudo-gradients against an unrolled reference.
//!
//! `cargo run --release --example gradcheck`

use sideways::verify::{run_gradcheck, GradcheckConfig};

fn main() {
    let report = run_gradcheck(&GradcheckConfig::default());
    print!("{}", report.to_text());
    let failed = report.failures().count();
    println!("{} checks, {failed} failed", report.checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
