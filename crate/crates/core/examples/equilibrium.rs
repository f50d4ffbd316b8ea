//! Zero-bias density of the double-barrier device for each configured scheme.
//!
//! cargo run --release --example equilibrium -- [config.toml]

use moyal::config::Config;
use moyal::harness::equilibrium;
use moyal::solve::SolverOptions;

fn main() -> moyal::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/equilibrium.toml").into());
    let (config, _) = Config::load(path.as_ref())?;
    for r in equilibrium(&config, &SolverOptions::default())? {
        println!(
            "dx*dk = {:.3}  {:<10} status {:<14} residual {:.1e}  min n = {:+.3e} /m^2  negative in well: {}",
            r.mesh_product,
            r.scheme,
            r.status.map(|s| s.to_string()).or(r.error).unwrap_or_default(),
            r.residual,
            r.min_density,
            r.negative_in_well
        );
    }
    Ok(())
}
