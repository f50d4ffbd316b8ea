//! The invariant suite behind `moyal validate`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{assemble, injection_values, ObservationPolicy, WindowSize};
use crate::config::{Config, DeviceKind};
use crate::observables::{density, current, wigner_transform, DeviceModel, Observables, QuantumState};
use crate::phasespace::{flat_potential, linear_potential, MaterialParams, PhaseGrid};
use crate::solve::{solve, SolveStatus, SolverOptions, WignerField};
use crate::stencil::{fornberg_weights, make_stencil, moment_violation, Rational};

use super::Check;

/// Every check, in a fixed order.
pub fn all(config: &Config) -> Vec<Check> {
    vec![
        stencil_moments(&sample_pairs()),
        stencil_float_agreement(&sample_pairs()),
        classical_limit(),
        wigner_oracle(),
        advection(config),
        linearity(),
        sparsity(config),
    ]
}

/// A spread of (derivative, accuracy) pairs up to d = 31, m = 64.
pub fn sample_pairs() -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for d in [1, 2, 3, 4, 5, 7, 8, 13, 21, 31] {
        for m in [2, 4, 6, 10, 16, 32, 64] {
            v.push((d, m));
        }
    }
    v
}

/// Exact moment conditions on the given tables; names every failing pair.
pub fn moment_check(tables: &[(usize, usize, Vec<Rational>)]) -> Check {
    let bad: Vec<String> = tables
        .iter()
        .filter_map(|(d, m, c)| moment_violation(*d, *m, c).map(|q| format!("(d, m) = ({d}, {m}) fails moment {q}")))
        .collect();
    let detail = if bad.is_empty() {
        format!("{} stencils satisfy every moment condition", tables.len())
    } else {
        bad.join("; ")
    };
    Check::new("stencil_moments", bad.is_empty(), detail)
}

pub fn stencil_moments(pairs: &[(usize, usize)]) -> Check {
    let mut tables = Vec::new();
    for &(d, m) in pairs {
        match make_stencil(d, m) {
            Ok(t) => tables.push((d, m, t.exact().to_vec())),
            Err(e) => return Check::new("stencil_moments", false, format!("({d}, {m}): {e}")),
        }
    }
    moment_check(&tables)
}

/// Floating coefficients against the exact ones and against an independent
/// floating recursion, both to 1e-10 relative.
pub fn stencil_float_agreement(pairs: &[(usize, usize)]) -> Check {
    let mut worst = (0.0f64, (0, 0));
    for &(d, m) in pairs {
        let (t, f) = match (make_stencil(d, m), fornberg_weights(d, m)) {
            (Ok(t), Ok(f)) => (t, f),
            (Err(e), _) | (_, Err(e)) => return Check::new("stencil_float", false, format!("({d}, {m}): {e}")),
        };
        let scale = t.max_abs();
        for ((c, r), w) in t.coefficients().iter().zip(t.exact()).zip(&f) {
            let exact = r.to_f64();
            let err = ((c - exact).abs()).max((w - exact).abs()) / scale;
            if err > worst.0 {
                worst = (err, (d, m));
            }
        }
    }
    Check::new(
        "stencil_float",
        worst.0 <= 1e-10,
        format!("worst relative error {:.2e} at (d, m) = {:?}", worst.0, worst.1),
    )
}

/// At dx dk = 1 with a linear potential the windowed system reduces to the
/// classical one entry for entry, and so do the solutions.
pub fn classical_limit() -> Check {
    let name = "classical_limit";
    let run = || -> crate::Result<(bool, bool)> {
        let g = PhaseGrid::new(0.4e-9, 2.5e9, 40, 16, true)?;
        let u = linear_potential(&g, -0.1 / (40.0 * 0.4e-9), 0.05);
        let m = MaterialParams::default();
        let a = assemble(&g, &u, &m, &ObservationPolicy::classical())?;
        let b = assemble(&g, &u, &m, &ObservationPolicy::auto())?;
        let opts = SolverOptions::default();
        let (fa, _) = solve(&a, &opts)?;
        let (fb, _) = solve(&b, &opts)?;
        let same = fa.values.iter().zip(&fb.values).all(|(x, y)| x.to_bits() == y.to_bits());
        Ok((a.entries_equal(&b), same))
    };
    match run() {
        Ok((e, s)) => Check::new(
            name,
            e && s,
            format!("entries identical: {e}, solutions bit-identical: {s}"),
        ),
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

fn gaussian(x: f64, x0: f64, sigma: f64, k0: f64) -> Complex64 {
    let a = (2.0 * PI * sigma * sigma).powf(-0.25) * (-(x - x0).powi(2) / (4.0 * sigma * sigma)).exp();
    Complex64::from_polar(a, k0 * x)
}

/// Gaussian and cat-state transforms against closed forms and marginals.
pub fn wigner_oracle() -> Check {
    let name = "wigner_oracle";
    let run = || -> crate::Result<String> {
        let (sigma, x0, k0) = (1.0, 10.0, 1.0);
        let g = PhaseGrid::new(0.1, 0.25, 201, 64, true)?;
        let psi: Vec<Complex64> = (0..g.nx).map(|i| gaussian(g.x(i), x0, sigma, k0)).collect();
        let f = wigner_transform(&QuantumState::Pure(psi.clone()), &g)?;
        let mut err = 0.0f64;
        for i in 0..g.nx {
            for j in 0..g.nk {
                let (x, k) = (g.x(i), g.k(j));
                let want =
                    2.0 * (-(x - x0).powi(2) / (2.0 * sigma * sigma) - 2.0 * sigma * sigma * (k - k0).powi(2)).exp();
                err = err.max((f.get(i, j) - want).abs());
            }
        }
        let n = density(&f, &g)?;
        let pos_err = (0..g.nx).fold(0.0f64, |a, i| a.max((n[i] - psi[i].norm_sqr()).abs()));
        let mut mom_err = 0.0f64;
        for j in 0..g.nk {
            let k = g.k(j);
            let phi: Complex64 = (0..g.nx)
                .map(|i| psi[i] * Complex64::from_polar(g.dx, -k * g.x(i)))
                .sum();
            let marginal: f64 = (0..g.nx).map(|i| f.get(i, j)).sum::<f64>() * g.dx;
            mom_err = mom_err.max((marginal - phi.norm_sqr()).abs());
        }
        let a = 3.0;
        let cat: Vec<Complex64> = (0..g.nx)
            .map(|i| (gaussian(g.x(i), x0 - a, 0.7, 0.0) + gaussian(g.x(i), x0 + a, 0.7, 0.0)) / 2f64.sqrt())
            .collect();
        let fc = wigner_transform(&QuantumState::Pure(cat), &g)?;
        let cat_min = fc.values.iter().copied().fold(f64::INFINITY, f64::min);
        let ok = err <= 1e-8 && pos_err <= 1e-8 && mom_err <= 1e-8 && cat_min < -0.1 * fc.max_abs();
        let detail = format!(
            "closed form {err:.2e}, position marginal {pos_err:.2e}, momentum marginal {mom_err:.2e}, cat min {cat_min:.3}"
        );
        if ok {
            Ok(detail)
        } else {
            Err(crate::Error::OutOfDomain(detail))
        }
    };
    match run() {
        Ok(d) => Check::new(name, true, d),
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

/// Flat potential: the solution is the injected distribution carried along x,
/// and the current is the same at every interface.
pub fn advection(config: &Config) -> Check {
    let name = "advection";
    let run = || -> crate::Result<(f64, f64, SolveStatus)> {
        let g = PhaseGrid::new(config.grid.dx_nm * 1e-9, config.grid.dk_per_nm * 1e9, 60, config.grid.nk, true)?;
        let m = config.material()?;
        let u = flat_potential(&g, 0.0);
        let sys = assemble(&g, &u, &m, &ObservationPolicy::auto())?;
        let (f, rep) = solve(&sys, &SolverOptions::default())?;
        let b = injection_values(&g, &m);
        let scale = f.max_abs();
        let mut err = 0.0f64;
        for i in 0..g.nx {
            for j in 0..g.nk {
                let want = if g.kappa(j) > 0.0 { b.left_values[j] } else { b.right_values[j] };
                err = err.max((f.get(i, j) - want).abs() / scale);
            }
        }
        let obs = Observables::compute(&f, &g, &m)?;
        let cont = obs.current_deviation() / obs.mean_current().abs().max(f64::MIN_POSITIVE);
        Ok((err, cont, rep.status))
    };
    match run() {
        Ok((err, cont, status)) => Check::new(
            name,
            err <= 1e-12 && cont < 1e-10 && status == SolveStatus::Success,
            format!("field error {err:.2e}, continuity deviation {cont:.2e}, status {status}"),
        ),
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

/// Density, current and the direct solve are linear.
pub fn linearity() -> Check {
    let name = "linearity";
    let run = || -> crate::Result<f64> {
        let g = PhaseGrid::new(0.4e-9, 0.05e9, 30, 16, true)?;
        let m = MaterialParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut field = || {
            WignerField::new(g.nx, g.nk, (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(), "r")
        };
        let (f1, f2) = (field()?, field()?);
        let (a, b) = (0.7, -1.3);
        let mix = WignerField::new(
            g.nx,
            g.nk,
            f1.values.iter().zip(&f2.values).map(|(x, y)| a * x + b * y).collect(),
            "mix",
        )?;
        let mut worst = 0.0f64;
        for (lhs, r1, r2) in [
            (density(&mix, &g)?, density(&f1, &g)?, density(&f2, &g)?),
            (current(&mix, &g, &m)?, current(&f1, &g, &m)?, current(&f2, &g, &m)?),
        ] {
            let scale = r1.iter().chain(&r2).fold(0.0f64, |s, v| s.max(v.abs()));
            for i in 0..lhs.len() {
                worst = worst.max((lhs[i] - (a * r1[i] + b * r2[i])).abs() / scale);
            }
        }
        let u = linear_potential(&g, 1e6, 0.0);
        let mut sys = assemble(&g, &u, &m, &ObservationPolicy::classical())?;
        let opts = SolverOptions::default();
        let (x1, _) = solve(&sys, &opts)?;
        for v in &mut sys.rhs {
            *v *= 2.0;
        }
        let (x2, _) = solve(&sys, &opts)?;
        let scale = x1.max_abs();
        for (p, q) in x1.values.iter().zip(&x2.values) {
            worst = worst.max((2.0 * p - q).abs() / scale);
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => Check::new(name, w <= 1e-12, format!("worst relative deviation {w:.2e}")),
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

/// After truncation the uncertainty-matched window stores fewer nonzeros than
/// a narrow window on the double-barrier device.
pub fn sparsity(config: &Config) -> Check {
    let name = "sparsity";
    let run = || -> crate::Result<(usize, usize)> {
        let mut device = config.device()?;
        device.kind = DeviceKind::Rtd;
        let u = device.potential(0.0)?;
        let auto = assemble(&device.grid, &u, &device.material, &ObservationPolicy::auto())?;
        let narrow = assemble(
            &device.grid,
            &u,
            &device.material,
            &ObservationPolicy::windowed(WindowSize::Fixed(5)),
        )?;
        Ok((auto.nz(), narrow.nz()))
    };
    match run() {
        Ok((a, n)) => Check::new(name, a < n, format!("nz(auto) = {a}, nz(n_obs = 5) = {n}")),
        Err(e) => Check::new(name, false, e.to_string()),
    }
}
