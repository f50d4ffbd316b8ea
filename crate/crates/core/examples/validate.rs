//! The invariant suite, printed as PASS/FAIL lines.
//!
//! cargo run --release --example validate -- [config.toml]

use moyal::config::Config;
use moyal::harness::checks;

fn main() -> moyal::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/rtd.toml").into());
    let (config, _) = Config::load(path.as_ref())?;
    for c in checks::all(&config) {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(())
}
