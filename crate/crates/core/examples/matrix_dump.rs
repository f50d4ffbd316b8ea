//! Assemble one system and look at its sparsity before writing it out.
//!
//! cargo run --release --example matrix_dump -- [out.mtx]

use moyal::assembly::{assemble, ObservationPolicy, WindowSize};
use moyal::observables::DeviceModel;
use moyal::config::Config;

fn main() -> moyal::Result<()> {
    let (config, _) = Config::load(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/rtd.toml").as_ref())?;
    let device = config.device()?;
    let u = device.potential(0.1)?;
    for policy in [
        ObservationPolicy::classical(),
        ObservationPolicy::unexpanded(),
        ObservationPolicy::windowed(WindowSize::Fixed(5)),
        ObservationPolicy::auto(),
    ] {
        let sys = assemble(&device.grid, &u, &device.material, &policy)?;
        let reach = sys.retained_orders.iter().filter_map(|r| r.last()).max();
        println!("{:<16} nz = {:>9}  highest retained order {:?}", policy.label(), sys.nz(), reach);
    }
    if let Some(path) = std::env::args().nth(1) {
        let sys = assemble(&device.grid, &u, &device.material, &ObservationPolicy::unexpanded())?;
        sys.dump_matrix(path.as_ref())?;
        println!("wrote {path}");
    }
    Ok(())
}
