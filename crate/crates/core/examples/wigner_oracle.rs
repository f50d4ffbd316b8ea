//! Wigner transforms of a Gaussian packet and a two-packet cat state.
//! The Gaussian matches its closed form; the cat state shows negative fringes.

use std::f64::consts::PI;

use moyal::observables::{density, wigner_transform, QuantumState};
use moyal::phasespace::PhaseGrid;
use num_complex::Complex64;

fn packet(x: f64, x0: f64, sigma: f64, k0: f64) -> Complex64 {
    let a = (2.0 * PI * sigma * sigma).powf(-0.25) * (-(x - x0).powi(2) / (4.0 * sigma * sigma)).exp();
    Complex64::from_polar(a, k0 * x)
}

fn main() -> moyal::Result<()> {
    let g = PhaseGrid::new(0.1, 0.25, 201, 64, true)?;
    let (x0, sigma, k0) = (10.0, 1.0, 1.0);
    let psi: Vec<Complex64> = (0..g.nx).map(|i| packet(g.x(i), x0, sigma, k0)).collect();
    let f = wigner_transform(&QuantumState::Pure(psi.clone()), &g)?;
    let mut worst = 0.0f64;
    for i in 0..g.nx {
        for j in 0..g.nk {
            let want = 2.0 * (-(g.x(i) - x0).powi(2) / (2.0 * sigma * sigma) - 2.0 * sigma * sigma * (g.k(j) - k0).powi(2)).exp();
            worst = worst.max((f.get(i, j) - want).abs());
        }
    }
    let n = density(&f, &g)?;
    let marginal = (0..g.nx).fold(0.0f64, |a, i| a.max((n[i] - psi[i].norm_sqr()).abs()));
    println!("gaussian: max |f - closed form| = {worst:.2e}, max |n - |psi|^2| = {marginal:.2e}");

    let cat: Vec<Complex64> = (0..g.nx)
        .map(|i| (packet(g.x(i), x0 - 3.0, 0.7, 0.0) + packet(g.x(i), x0 + 3.0, 0.7, 0.0)) / 2f64.sqrt())
        .collect();
    let fc = wigner_transform(&QuantumState::Pure(cat), &g)?;
    let mid = g.x_index(x0).unwrap();
    println!("cat state at x = {x0}: f(k) across the fringes");
    for j in (24..40).step_by(2) {
        println!("  k = {:+.3}  f = {:+.4}", g.k(j), fc.get(mid, j));
    }
    Ok(())
}
