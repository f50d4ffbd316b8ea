//! Peak-to-valley ratio as a function of the observation window.
//!
//! cargo run --release --example window_sweep -- [config.toml]

use moyal::config::Config;
use moyal::harness::{best_window, window_sweep};
use moyal::solve::SolverOptions;

fn main() -> moyal::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/window_sweep.toml").into());
    let (mut config, _) = Config::load(path.as_ref())?;
    config.sweep.bias_step_V = 0.02;
    let results = window_sweep(&config, &SolverOptions::default())?;
    println!("window  PVR    near-singular  failed  oscillatory");
    for r in &results {
        println!(
            "{:<7} {:<6.2} {:<14} {:<7} {}",
            r.window.label(),
            r.peak_to_valley,
            r.near_singular_points,
            r.failed_points,
            r.oscillatory
        );
    }
    if let Some(b) = best_window(&results) {
        println!("largest PVR at {}", b.window.label());
    }
    Ok(())
}
