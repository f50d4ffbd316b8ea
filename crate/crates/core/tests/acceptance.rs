//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with `harness = false`. By default it reports and exits 0 so that
//! the remaining test targets still run; set `MOYAL_ACCEPTANCE_STRICT=1` to
//! exit 1 when any criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moyal::assembly::{assemble, ObservationPolicy, WindowSize};
use moyal::config::{Config, WindowSpec};
use moyal::harness::{self, EquilibriumResult};
use moyal::observables::{density, wigner_transform, DeviceModel, Observables, QuantumState};
use moyal::phasespace::{flat_potential, MaterialParams, PhaseGrid, PotentialProfile};
use moyal::solve::{solve, SolveStatus, SolverOptions};
use moyal::stencil::{make_stencil, Rational};

type Verdict = Result<(bool, String), String>;

const RTD: &str = r#"
[grid]
dx_nm = 0.4
dk_per_nm = 0.05
nx = 178
nk = 128

[device]
kind = "rtd"

[sweep]
bias_start_V = 0.0
bias_stop_V = 0.30
bias_step_V = 0.01
"#;

fn rtd_config(extra: &str) -> Result<Config, String> {
    Config::parse(&format!("{RTD}\n{extra}")).map_err(|e| e.to_string())
}

fn big(r: &Rational) -> BigInt {
    r.numerator.to_string().parse().unwrap()
}

fn exact(r: &Rational) -> BigRational {
    BigRational::new(big(r), r.denominator.to_string().parse().unwrap())
}

fn to_f64(r: &BigRational) -> f64 {
    use num_traits::ToPrimitive;
    r.to_f64().unwrap_or(f64::NAN)
}

fn factorial(n: usize) -> BigInt {
    (1..=n).fold(BigInt::one(), |a, k| a * BigInt::from(k))
}

/// Exact moments `sum_l a_l l^q` for `q = 0..=2p`, checked against
/// `d! [q == d]` over a common denominator.
fn moments_hold(d: usize, coefficients: &[Rational]) -> Option<usize> {
    let p = (coefficients.len() / 2) as i64;
    let rats: Vec<BigRational> = coefficients.iter().map(exact).collect();
    let lcm = rats.iter().fold(BigInt::one(), |l, r| {
        let g = num_integer_gcd(&l, r.denom());
        &l / g * r.denom()
    });
    let ints: Vec<BigInt> = rats.iter().map(|r| r.numer() * (&lcm / r.denom())).collect();
    for q in 0..=(2 * p) as u32 {
        let s: BigInt = ints
            .iter()
            .enumerate()
            .map(|(i, c)| c * BigInt::from(i as i64 - p).pow(q))
            .sum();
        let want = if q as usize == d { factorial(d) * &lcm } else { BigInt::zero() };
        if s != want {
            return Some(q as usize);
        }
    }
    None
}

fn num_integer_gcd(a: &BigInt, b: &BigInt) -> BigInt {
    let (mut a, mut b) = (a.abs(), b.abs());
    while !b.is_zero() {
        let t = &a % &b;
        a = b;
        b = t;
    }
    a
}

fn criterion_1() -> Verdict {
    let mut worst = 0.0f64;
    let mut tables = 0;
    for d in 1..=31 {
        for m in (2..=64).step_by(2) {
            let t = make_stencil(d, m).map_err(|e| e.to_string())?;
            for (f, r) in t.coefficients().iter().zip(t.exact()) {
                let e = exact(r);
                if e.is_zero() {
                    if *f != 0.0 {
                        return Ok((false, format!("(d, m) = ({d}, {m}): {f:e} where the exact value is 0")));
                    }
                    continue;
                }
                let back = BigRational::from_float(*f).unwrap_or_else(BigRational::zero);
                worst = worst.max(to_f64(&((back - &e) / &e).abs()));
            }
            tables += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut failures = Vec::new();
    for _ in 0..200 {
        let d = rng.gen_range(1..=31);
        let m = 2 * rng.gen_range(1..=32);
        let t = make_stencil(d, m).map_err(|e| e.to_string())?;
        if let Some(q) = moments_hold(d, t.exact()) {
            failures.push(format!("({d}, {m}) moment {q}"));
        }
    }
    Ok((
        worst <= 1e-10 && failures.is_empty(),
        format!(
            "{tables} tables, worst float relative error {worst:.2e}; 200 random pairs, {} moment failures{}",
            failures.len(),
            if failures.is_empty() { String::new() } else { format!(" [{}]", failures.join(", ")) }
        ),
    ))
}

fn weight_sum(d: usize, m: usize) -> Result<BigRational, String> {
    let t = make_stencil(d, m).map_err(|e| e.to_string())?;
    Ok(t.exact().iter().map(|r| exact(r).abs()).sum())
}

fn criterion_2() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for d in [9usize, 15, 21] {
        let mut prev: Option<BigRational> = None;
        let mut rises = 0;
        let mut first_rise = None;
        let mut m = 2 * d;
        while m <= 64 {
            let a = weight_sum(d, m)?;
            if let Some(p) = &prev {
                if &a > p {
                    rises += 1;
                    first_rise.get_or_insert(m);
                }
            }
            prev = Some(a);
            m += 2;
        }
        let ratio = to_f64(&(weight_sum(d, 64)? / weight_sum(d, 2 * d)?));
        ok &= rises == 0;
        notes.push(match first_rise {
            None => format!("d={d}: non-increasing on m={}..64", 2 * d),
            Some(r) => format!("d={d}: {rises} increases from m={r}, A(64)/A({}) = {ratio:.3e}", 2 * d),
        });
    }
    Ok((ok, notes.join("; ")))
}

/// Samples that are exactly linear in floating point.
fn exact_line(g: &PhaseGrid, a: i64, b: i64) -> PotentialProfile {
    PotentialProfile::new((0..g.nx).map(|i| (a + b * i as i64) as f64 * 2f64.powi(-16)).collect(), g.dx)
}

fn criterion_3() -> Verdict {
    let m = MaterialParams::default();
    let mut notes = Vec::new();
    let mut ok = true;
    // uncertainty-matched window where it is one node wide, and the
    // lowest-order window at the desk mesh
    let cases = [
        (PhaseGrid::new(0.4e-9, 2.5e9, 178, 128, true), ObservationPolicy::auto(), "auto at dxdk = 1"),
        (
            PhaseGrid::new(0.4e-9, 0.05e9, 178, 128, true),
            ObservationPolicy::windowed(WindowSize::Fixed(1)),
            "n_obs = 1 at dxdk = 0.02",
        ),
    ];
    for (g, policy, label) in cases {
        let g = g.map_err(|e| e.to_string())?;
        // about -0.1 eV across the device
        let u = exact_line(&g, 6554, -37);
        let c = assemble(&g, &u, &m, &ObservationPolicy::classical()).map_err(|e| e.to_string())?;
        let w = assemble(&g, &u, &m, &policy).map_err(|e| e.to_string())?;
        let same_entries = c.row_ptr == w.row_ptr
            && c.cols == w.cols
            && c.vals.iter().zip(&w.vals).all(|(a, b)| a.to_bits() == b.to_bits())
            && c.rhs.iter().zip(&w.rhs).all(|(a, b)| a.to_bits() == b.to_bits());
        let opts = SolverOptions::default();
        let (fc, _) = solve(&c, &opts).map_err(|e| e.to_string())?;
        let (fw, _) = solve(&w, &opts).map_err(|e| e.to_string())?;
        let same_solution = fc.values.iter().zip(&fw.values).all(|(a, b)| a.to_bits() == b.to_bits());
        ok &= same_entries && same_solution;
        notes.push(format!("{label}: entries identical {same_entries}, solution bit-identical {same_solution}"));
    }
    Ok((ok, notes.join("; ")))
}

fn criterion_4() -> Verdict {
    let g = PhaseGrid::new(0.4e-9, 0.05e9, 178, 128, true).map_err(|e| e.to_string())?;
    let m = MaterialParams::default();
    let sys = assemble(&g, &flat_potential(&g, 0.0), &m, &ObservationPolicy::auto()).map_err(|e| e.to_string())?;
    let (f, rep) = solve(&sys, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let scale = f.max_abs();
    let mut err = 0.0f64;
    for i in 0..g.nx {
        for j in 0..g.nk {
            let contact = if g.kappa(j) > 0.0 { 0 } else { g.nx - 1 };
            let want = sys.rhs[g.index(contact, j)];
            err = err.max((f.get(i, j) - want).abs() / scale);
        }
    }
    let obs = Observables::compute(&f, &g, &m).map_err(|e| e.to_string())?;
    let cont = obs.current_deviation() / obs.mean_current().abs();
    Ok((
        err <= 1e-12 && cont < 1e-10,
        format!("field error {err:.2e} (relative to max f), continuity deviation {cont:.2e}, status {}", rep.status),
    ))
}

fn packet(x: f64, x0: f64, sigma: f64, k0: f64) -> Complex64 {
    let a = (2.0 * PI * sigma * sigma).powf(-0.25) * (-(x - x0).powi(2) / (4.0 * sigma * sigma)).exp();
    Complex64::from_polar(a, k0 * x)
}

fn criterion_5() -> Verdict {
    let g = PhaseGrid::new(0.1, 0.25, 201, 64, true).map_err(|e| e.to_string())?;
    let (x0, sigma, k0) = (10.0, 1.0, 1.0);
    let psi: Vec<Complex64> = (0..g.nx).map(|i| packet(g.x(i), x0, sigma, k0)).collect();
    let f = wigner_transform(&QuantumState::Pure(psi.clone()), &g).map_err(|e| e.to_string())?;
    let mut closed = 0.0f64;
    for i in 0..g.nx {
        for j in 0..g.nk {
            let (x, k) = (g.x(i), g.k(j));
            let want = 2.0 * (-(x - x0).powi(2) / (2.0 * sigma * sigma) - 2.0 * sigma * sigma * (k - k0).powi(2)).exp();
            closed = closed.max((f.get(i, j) - want).abs());
        }
    }
    let n = density(&f, &g).map_err(|e| e.to_string())?;
    let pos = (0..g.nx).fold(0.0f64, |a, i| a.max((n[i] - psi[i].norm_sqr()).abs()));
    // |psi~(k)|^2 from the closed-form Fourier transform of the packet
    let mut mom = 0.0f64;
    for j in 0..g.nk {
        let k = g.k(j);
        let want = (8.0 * PI * sigma * sigma).sqrt() * (-2.0 * sigma * sigma * (k - k0).powi(2)).exp();
        let marginal: f64 = (0..g.nx).map(|i| f.get(i, j)).sum::<f64>() * g.dx;
        mom = mom.max((marginal - want).abs());
    }
    let cat: Vec<Complex64> = (0..g.nx)
        .map(|i| (packet(g.x(i), x0 - 3.0, 0.7, 0.0) + packet(g.x(i), x0 + 3.0, 0.7, 0.0)) / 2f64.sqrt())
        .collect();
    let fc = wigner_transform(&QuantumState::Pure(cat), &g).map_err(|e| e.to_string())?;
    let cat_min = fc.values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((
        closed <= 1e-8 && pos <= 1e-8 && mom <= 1e-8 && cat_min < 0.0,
        format!(
            "closed form {closed:.2e}, |psi|^2 marginal {pos:.2e}, |psi~|^2 marginal {mom:.2e}, cat min f {cat_min:.3} (max {:.3})",
            fc.max_abs()
        ),
    ))
}

fn describe(r: &EquilibriumResult) -> String {
    format!(
        "{} status {}, residual {:.1e}, min n {:.2e}{}",
        r.scheme,
        r.status.map(|s| s.to_string()).unwrap_or_else(|| "failed".into()),
        r.residual,
        r.min_density,
        if r.negative_in_well { " (negative in well)" } else { "" }
    )
}

fn criterion_6() -> Verdict {
    let mut c = rtd_config("[equilibrium]\nschemes = [\"unexpanded\", \"auto\"]\n")?;
    c.grid.dk_per_nm = 0.07;
    let res = harness::equilibrium(&c, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let unexpanded = res.iter().find(|r| r.scheme == WindowSpec::Fixed(1).label()).ok_or("no unexpanded run")?;
    let auto = res.iter().find(|r| r.scheme == WindowSpec::Auto.label()).ok_or("no auto run")?;
    let a = unexpanded.negative_in_well || unexpanded.status == Some(SolveStatus::NearSingular);
    let b = auto.status == Some(SolveStatus::Success) && auto.density.iter().all(|n| *n >= 0.0);
    Ok((
        a && b,
        format!(
            "dxdk = {:.3}; {} [{}]; {} [{}]",
            unexpanded.mesh_product,
            describe(unexpanded),
            if a { "ok" } else { "expected instability" },
            describe(auto),
            if b { "ok" } else { "expected n >= 0 and success" }
        ),
    ))
}

fn criterion_7() -> Verdict {
    let c = rtd_config("")?;
    let res = harness::window_sweep(&c, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let pvr = |n: usize| res.iter().find(|r| r.window == WindowSpec::Fixed(n));
    let (w5, w50, w200) = (pvr(5).ok_or("no n5")?, pvr(50).ok_or("no n50")?, pvr(200).ok_or("no n200")?);
    let best = res
        .iter()
        .max_by(|a, b| a.peak_to_valley.total_cmp(&b.peak_to_valley))
        .ok_or("empty sweep")?;
    let optimum = best.window == WindowSpec::Fixed(50);
    let narrow_flagged = w5.flagged();
    let wide = w200.peak_to_valley < w50.peak_to_valley && (w200.peak_to_valley - 1.0).abs() <= 0.25;
    let table: Vec<String> = res
        .iter()
        .map(|r| {
            format!(
                "{} PVR {:.3} ({} near-singular, {} failed{})",
                r.window.label(),
                r.peak_to_valley,
                r.near_singular_points,
                r.failed_points,
                if r.oscillatory { ", oscillatory" } else { "" }
            )
        })
        .collect();
    Ok((
        optimum && narrow_flagged && wide,
        format!(
            "{}; max at {} [{}], n5 flagged {narrow_flagged}, n200 below optimum and within 25% of 1 {wide}",
            table.join(", "),
            best.window.label(),
            if optimum { "ok" } else { "expected n50" }
        ),
    ))
}

fn criterion_8() -> Verdict {
    let mut c = rtd_config("[observation]\nn_obs = \"auto\"\n")?;
    c.sweep.mesh_scales = vec![1.0, 0.75, 1.5];
    let res = harness::mesh_sweep(&c, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut common = 0;
    for p in 0..res[0].records.len() {
        let recs: Vec<_> = res.iter().map(|r| &r.records[p]).collect();
        if recs.iter().all(|r| r.error.is_none() && r.status == SolveStatus::Success) {
            common += 1;
            let base = recs[0].current;
            for r in &recs[1..] {
                worst = worst.max((r.current - base).abs() / base.abs());
            }
        }
    }
    let successes: Vec<String> = res
        .iter()
        .map(|r| {
            let ok = r.records.iter().filter(|x| x.error.is_none() && x.status == SolveStatus::Success).count();
            format!("dk x {}: {ok}/{} success", r.scale, r.records.len())
        })
        .collect();
    Ok((
        common > 0 && worst <= 0.15,
        format!(
            "{}; {common} common successful biases, worst relative deviation {}",
            successes.join(", "),
            if common > 0 { format!("{worst:.3}") } else { "n/a".into() }
        ),
    ))
}

fn criterion_9() -> Verdict {
    let c = rtd_config("[observation]\nn_obs = \"auto\"\n[decohere]\nn_obs = 22\n")?;
    let r = harness::decohere(&c, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let arm = |n: &str| r.arm(n).ok_or(format!("no {n} arm"));
    let (coh, a, b) = (arm("coherent")?, arm("decohere_a")?, arm("decohere_b")?);
    let suppressed = a.peak_to_valley < 0.5 * coh.peak_to_valley;
    let kept = b.peak_to_valley >= 0.8 * coh.peak_to_valley;
    let negativity = coh.min_f.abs() > a.min_f.abs();
    let ns = |x: &moyal::harness::DecohereArm| x.records.iter().filter(|r| r.status != SolveStatus::Success).count();
    Ok((
        suppressed && kept && negativity,
        format!(
            "points A={} B={}; PVR coherent {:.3}, A {:.3}, B {:.3}; |min f| at {:.2} V coherent {:.3e} vs A {:.3e}; non-success points {}/{}/{}",
            r.point_a,
            r.point_b,
            coh.peak_to_valley,
            a.peak_to_valley,
            b.peak_to_valley,
            r.field_bias,
            coh.min_f.abs(),
            a.min_f.abs(),
            ns(coh),
            ns(a),
            ns(b)
        ),
    ))
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b })
}

fn criterion_10() -> Verdict {
    let c = Config::parse(
        r#"
[grid]
dx_nm = 0.4
dk_per_nm = 0.05
nx = 178
nk = 128
[device]
kind = "random"
amplitude_eV = 0.5
seed = 1
[measure]
seeds = 10
pins = [{ x_nm = 70.0, k_per_nm = 0.0 }]
multi_pins = [{ x_nm = 70.0, k_per_nm = -1.0 }, { x_nm = 70.0, k_per_nm = 1.0 }]
"#,
    )
    .map_err(|e| e.to_string())?;
    let r = harness::measure(&c).map_err(|e| e.to_string())?;
    let pin = r.pins[0].k_index;
    let at_pin = r
        .solutions
        .iter()
        .filter(|s| s.status == SolveStatus::Success && argmax(&s.profile) == pin)
        .count();
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..r.solutions.len() {
        for j in i + 1..r.solutions.len() {
            let (a, b) = (&r.solutions[i].profile, &r.solutions[j].profile);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            sum += dot / (na * nb);
            pairs += 1;
        }
    }
    let mean = sum / pairs as f64;
    let (peaks, multi_status) = match &r.multi {
        Some(m) => {
            let top = m.profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &m.profile;
            let peaks: Vec<usize> = (1..p.len() - 1)
                .filter(|&j| p[j] > p[j - 1] && p[j] >= p[j + 1] && p[j] >= 0.5 * top)
                .collect();
            (peaks, m.status.to_string())
        }
        None => (Vec::new(), "missing".into()),
    };
    Ok((
        at_pin == r.solutions.len() && r.solutions.len() == 10 && mean >= 0.9 && peaks.len() == 2,
        format!(
            "{at_pin}/{} seeds peak at the pin, mean cosine {mean:.8}; two-pin run {multi_status} with maxima at k indices {peaks:?}",
            r.solutions.len()
        ),
    ))
}

fn criterion_11() -> Verdict {
    let c = Config::parse(
        r#"
[grid]
dx_nm = 0.4
dk_per_nm = 0.05
nx = 178
nk = 128
[device]
kind = "flat"
pulse_height_eV = 0.5
pulse_width_cells = 1
[bigbang]
gap_cells = 55
j_max = [40, 56, 63]
"#,
    )
    .map_err(|e| e.to_string())?;
    let r = harness::bigbang(&c).map_err(|e| e.to_string())?;
    let mut ok = r.pulse_index - r.pin.x_index == 55;
    let mut notes = Vec::new();
    for (pulse, j, s) in &r.arms {
        let expect_success = *pulse && *j >= 56;
        let good = if expect_success {
            s.status == SolveStatus::Success && argmax(&s.profile) == r.pin.k_index
        } else {
            s.status == SolveStatus::Unmeasurable
        };
        ok &= good;
        notes.push(format!(
            "{} j_max {j}: {}{}",
            if *pulse { "pulse" } else { "flat" },
            s.status,
            if s.status == SolveStatus::Success { format!(" argmax {}", argmax(&s.profile)) } else { String::new() }
        ));
    }
    Ok((ok, format!("pin k index {}; {}", r.pin.k_index, notes.join(", "))))
}

fn criterion_12() -> Verdict {
    let c = rtd_config("")?;
    let device = c.device().map_err(|e| e.to_string())?;
    let u = device.potential(0.0).map_err(|e| e.to_string())?;
    let nz = |p: &ObservationPolicy| assemble(&device.grid, &u, &device.material, p).map(|s| s.nz());
    let auto = nz(&ObservationPolicy::auto()).map_err(|e| e.to_string())?;
    let five = nz(&ObservationPolicy::windowed(WindowSize::Fixed(5))).map_err(|e| e.to_string())?;
    Ok((auto < five, format!("nz(auto) = {auto}, nz(n_obs = 5) = {five}, dxdk = {:.3}", device.grid.mesh_product())))
}

fn main() {
    let criteria: [(usize, fn() -> Verdict); 12] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
        (12, criterion_12),
    ];
    let only: Option<Vec<usize>> = std::env::var("MOYAL_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    let mut ran = 0;
    for (n, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {n} {}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        if !pass {
            failed.push(n);
        }
    }
    println!("acceptance: {} of {ran} criteria passed; failed {failed:?}", ran - failed.len());
    let strict = std::env::var("MOYAL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
