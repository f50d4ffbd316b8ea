//! One I-V sweep of the double-barrier device with its NDR peak.
//!
//! cargo run --release --example iv_curve -- [config.toml] [n_obs]

use moyal::config::Config;
use moyal::observables::{detect_ndr, iv_sweep};
use moyal::assembly::{ObservationPolicy, WindowSize};
use moyal::solve::SolverOptions;

fn main() -> moyal::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/rtd.toml").into());
    let (mut config, _) = Config::load(path.as_ref())?;
    // a coarser sweep keeps the example quick
    config.sweep.bias_step_V = 0.02;
    let policy = match args.next().and_then(|n| n.parse().ok()) {
        Some(n) => ObservationPolicy::windowed(WindowSize::Fixed(n)),
        None => ObservationPolicy::unexpanded(),
    };
    let device = config.device()?;
    let recs = iv_sweep(&device, &config.sweep.biases()?, &policy, &SolverOptions::default());
    println!("policy {}", policy.label());
    for r in &recs {
        println!(
            "{:5.2} V  J = {:+.4e} A/m  status {:<13} residual {:.1e}{}",
            r.bias,
            r.current,
            r.status,
            r.residual,
            if r.peak_flag { "  <- peak" } else { "" }
        );
    }
    match detect_ndr(&recs) {
        Some(n) => println!("peak {:.2} V, valley {:.2} V, PVR {:.2}", n.peak_bias, n.valley_bias, n.peak_to_valley),
        None => println!("no NDR region among the successful points"),
    }
    Ok(())
}
