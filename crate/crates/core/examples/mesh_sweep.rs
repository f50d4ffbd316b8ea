//! I-V curves on scaled k meshes and their point-wise agreement.
//!
//! cargo run --release --example mesh_sweep -- [config.toml]

use moyal::config::Config;
use moyal::harness::{mesh_agreement, mesh_sweep};
use moyal::solve::{SolveStatus, SolverOptions};

fn main() -> moyal::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/mesh_sweep.toml").into());
    let (mut config, _) = Config::load(path.as_ref())?;
    config.sweep.bias_step_V = 0.05;
    let results = mesh_sweep(&config, &SolverOptions::default())?;
    for r in &results {
        let ok = r.records.iter().filter(|x| x.status == SolveStatus::Success && x.error.is_none()).count();
        println!("dx*dk = {:.4}: {ok}/{} successful points", r.mesh_product, r.records.len());
    }
    let (dev, common) = mesh_agreement(&results);
    println!("max relative deviation {dev:.3} over {common} common successful biases");
    Ok(())
}
