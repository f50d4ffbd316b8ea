//! Central-difference stencils: exact fractions, floats, and how the weight
//! sum `A(d, m)` behaves as the accuracy order grows.
//!
//! cargo run --example stencil_coefficients -- 3 6

use moyal::stencil::{half_width, make_stencil, nonlocal_power};

fn main() -> moyal::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (d, m) = (args.first().copied().unwrap_or(3), args.get(1).copied().unwrap_or(6));
    let t = make_stencil(d, m)?;
    println!("d = {d}, m = {m}, half-width {}", half_width(d, m));
    for ((l, v), r) in t.offsets().zip(t.exact()) {
        println!("{l:>4}  {r:>24}  {v:+.17e}");
    }
    println!("A = {:.6}", t.weight_sum());

    println!("\nA(d, m) for odd d:");
    for d in [9, 15, 21] {
        let row: Vec<String> = [2, 2 * d, 2 * d + 10, 4 * d]
            .iter()
            .map(|&m| format!("A({d},{m}) = {:.4e}", make_stencil(d, m).map(|t| t.weight_sum()).unwrap_or(f64::NAN)))
            .collect();
        println!("  {}", row.join("  "));
    }

    println!("\nnonlocal power C_j at dx*dk = 0.02:");
    for j in [1, 3, 11, 25, 51, 101] {
        println!("  C_{j:<3} = {:.3e}", nonlocal_power(j, 0.02));
    }
    Ok(())
}
