//! A flat device cannot be measured; a distant pulse makes it measurable once
//! the series reaches far enough.
//!
//! cargo run --release --example big_bang -- [config.toml]

use moyal::config::Config;
use moyal::harness::bigbang;

fn main() -> moyal::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/bigbang.toml").into());
    let (config, _) = Config::load(path.as_ref())?;
    let r = bigbang(&config)?;
    println!("pin at x index {}, pulse at {}", r.pin.x_index, r.pulse_index);
    for (pulse, j, s) in &r.arms {
        println!(
            "pulse {:<5} j_max {:<3} {:<13} highest retained order {:?}",
            pulse,
            j,
            s.status.to_string(),
            s.retained_orders.last()
        );
    }
    Ok(())
}
