//! Measurement mode: the pinned k-profile is the same whatever the potential.
//!
//! cargo run --release --example measurement -- [config.toml]

use moyal::config::Config;
use moyal::harness::measure;

fn main() -> moyal::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/measure.toml").into());
    let (config, _) = Config::load(path.as_ref())?;
    let r = measure(&config)?;
    for s in &r.solutions {
        println!("{:<7} {:<12} argmax k index {} (pin {})", s.label, s.status, s.argmax, r.pins[0].k_index);
    }
    println!("mean pairwise cosine similarity {:.6}", r.mean_similarity);
    if let Some(m) = &r.multi {
        println!("{} pins: status {}, local maxima at k indices {:?}", r.multi_pins.len(), m.status, r.multi_maxima);
    }
    Ok(())
}
