//! Narrowing the observation window at one point of the device.
//!
//! cargo run --release --example decoherence -- [config.toml]

use moyal::config::Config;
use moyal::harness::decohere;
use moyal::solve::SolverOptions;

fn main() -> moyal::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/decohere.toml").into());
    let (mut config, _) = Config::load(path.as_ref())?;
    config.sweep.bias_step_V = 0.05;
    let r = decohere(&config, &SolverOptions::default())?;
    println!("A at x index {}, B at x index {}; fields at {:.2} V", r.point_a, r.point_b, r.field_bias);
    for arm in &r.arms {
        println!(
            "{:<11} {:<24} PVR {:.2}  min f {:+.3e}",
            arm.name, arm.policy, arm.peak_to_valley, arm.min_f
        );
    }
    Ok(())
}
