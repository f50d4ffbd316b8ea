//! Densities, currents, negativity, the Wigner-transform oracle and I–V sweeps.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, ObservationPolicy};
use crate::error::{Error, Result};
use crate::phasespace::{MaterialParams, PhaseGrid, PotentialProfile, HBAR};
use crate::solve::{solve, SolveReport, SolveStatus, SolverOptions, WignerField};

/// Relative spread of the current over x allowed on a successful solve.
pub const CONTINUITY_TOLERANCE: f64 = 1e-6;

fn check(field: &WignerField, grid: &PhaseGrid) -> Result<()> {
    if field.nx != grid.nx || field.nk != grid.nk {
        return Err(Error::GridMismatch(format!(
            "field is {}x{}, grid is {}x{}",
            field.nx, field.nk, grid.nx, grid.nk
        )));
    }
    Ok(())
}

/// `n(x_i) = (1 / 2 pi) sum_j f(x_i, k_j) dk`, per m^2 in the contact units.
pub fn density(field: &WignerField, grid: &PhaseGrid) -> Result<Vec<f64>> {
    check(field, grid)?;
    Ok((0..grid.nx)
        .map(|i| field.slice(i).iter().sum::<f64>() * grid.dk / (2.0 * PI))
        .collect())
}

/// Upwinded current at the `nx - 1` cell interfaces.
pub fn current(field: &WignerField, grid: &PhaseGrid, material: &MaterialParams) -> Result<Vec<f64>> {
    check(field, grid)?;
    let v = HBAR / material.mstar();
    Ok((0..grid.nx - 1)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..grid.nk {
                let k = grid.k(j);
                if k > 0.0 {
                    s += v * k * field.get(i, j);
                } else if k < 0.0 {
                    s += v * k * field.get(i + 1, j);
                }
            }
            s * grid.dk / (2.0 * PI)
        })
        .collect())
}

/// Most negative value and fraction of strictly negative nodes.
pub fn negativity(field: &WignerField) -> (f64, f64) {
    let min = field.values.iter().copied().fold(f64::INFINITY, f64::min);
    let neg = field.values.iter().filter(|v| **v < 0.0).count();
    (min, neg as f64 / field.values.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub density: Vec<f64>,
    pub current: Vec<f64>,
    pub min_f: f64,
    pub negative_fraction: f64,
}

impl Observables {
    pub fn compute(field: &WignerField, grid: &PhaseGrid, material: &MaterialParams) -> Result<Self> {
        let (min_f, negative_fraction) = negativity(field);
        Ok(Observables {
            density: density(field, grid)?,
            current: current(field, grid, material)?,
            min_f,
            negative_fraction,
        })
    }

    pub fn mean_current(&self) -> f64 {
        self.current.iter().sum::<f64>() / self.current.len() as f64
    }

    /// Largest `|J_i - mean|`.
    pub fn current_deviation(&self) -> f64 {
        let m = self.mean_current();
        self.current.iter().fold(0.0f64, |a, j| a.max((j - m).abs()))
    }
}

/// Position-space description of a quantum state on the x grid.
#[derive(Debug, Clone)]
pub enum QuantumState {
    Pure(Vec<Complex64>),
    /// Row-major `nx x nx` density matrix `rho(x_a, x_b)`.
    Mixed(Vec<Complex64>),
}

impl QuantumState {
    fn rho(&self, n: usize, a: usize, b: usize) -> Complex64 {
        match self {
            QuantumState::Pure(psi) => psi[a] * psi[b].conj(),
            QuantumState::Mixed(rho) => rho[a * n + b],
        }
    }
}

/// `f(x, k) = int e^{-iky} rho(x + y/2, x - y/2) dy` by the trapezoid rule
/// over the sampled range of `y`.
///
/// With `y = 2 s dx` the integrand lands on grid nodes, so the k grid must fit
/// inside one period `|k| <= pi / (2 dx)`.
pub fn wigner_transform(state: &QuantumState, grid: &PhaseGrid) -> Result<WignerField> {
    let n = grid.nx;
    let ok = match state {
        QuantumState::Pure(psi) => psi.len() == n,
        QuantumState::Mixed(rho) => rho.len() == n * n,
    };
    if !ok {
        return Err(Error::GridMismatch(format!("state is not sampled on the {n}-node x grid")));
    }
    let kmax = grid.ks().iter().fold(0.0f64, |a, k| a.max(k.abs()));
    if kmax * 2.0 * grid.dx > PI * (1.0 + 1e-12) {
        return Err(Error::GridMismatch(format!(
            "k grid reaches {kmax:e} 1/m, beyond the transform period pi/(2 dx) = {:e}",
            PI / (2.0 * grid.dx)
        )));
    }
    let ks = grid.ks();
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let smax = i.min(n - 1 - i) as isize;
            let mut out = Vec::with_capacity(grid.nk);
            for &k in &ks {
                let mut acc = Complex64::new(0.0, 0.0);
                for s in -smax..=smax {
                    let w = if s.abs() == smax && smax > 0 { 0.5 } else { 1.0 };
                    let a = (i as isize + s) as usize;
                    let b = (i as isize - s) as usize;
                    let phase = Complex64::from_polar(1.0, -k * 2.0 * s as f64 * grid.dx);
                    acc += phase * state.rho(n, a, b) * w;
                }
                acc *= 2.0 * grid.dx;
                if acc.im.abs() > 1e-10 * acc.re.abs().max(1.0) {
                    return Err(Error::GridMismatch(format!(
                        "transform at x index {i} has imaginary residue {:e}",
                        acc.im
                    )));
                }
                out.push(acc.re);
            }
            Ok(out)
        })
        .collect();
    let mut values = Vec::with_capacity(n * grid.nk);
    for r in rows {
        values.extend(r?);
    }
    WignerField::new(n, grid.nk, values, "wigner transform")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IVRecord {
    pub bias: f64,
    /// Mean of the interface currents.
    pub current: f64,
    /// Largest deviation of an interface current from the mean.
    pub current_deviation: f64,
    pub status: SolveStatus,
    pub residual: f64,
    pub policy: String,
    pub mesh_product: f64,
    pub min_f: f64,
    /// Set on the NDR peak after detection.
    pub peak_flag: bool,
    /// Assembly or solver error text, if the point failed outright.
    pub error: Option<String>,
}

impl IVRecord {
    pub fn continuity_ok(&self) -> bool {
        self.current_deviation <= CONTINUITY_TOLERANCE * self.current.abs()
    }
}

/// Builds the potential for each bias point of a sweep.
pub trait DeviceModel: Sync {
    fn grid(&self) -> &PhaseGrid;
    fn material(&self) -> &MaterialParams;
    fn potential(&self, bias: f64) -> Result<PotentialProfile>;
}

/// Assemble and solve one bias point.
pub fn solve_bias(
    device: &dyn DeviceModel,
    bias: f64,
    policy: &ObservationPolicy,
    opts: &SolverOptions,
) -> Result<(WignerField, SolveReport)> {
    let u = device.potential(bias)?;
    let sys = assemble(device.grid(), &u, device.material(), policy)?;
    solve(&sys, opts)
}

fn record(device: &dyn DeviceModel, bias: f64, policy: &ObservationPolicy, opts: &SolverOptions) -> IVRecord {
    let grid = device.grid();
    let mut rec = IVRecord {
        bias,
        current: f64::NAN,
        current_deviation: f64::NAN,
        status: SolveStatus::NearSingular,
        residual: f64::NAN,
        policy: policy.label(),
        mesh_product: grid.mesh_product(),
        min_f: f64::NAN,
        peak_flag: false,
        error: None,
    };
    match solve_bias(device, bias, policy, opts) {
        Ok((field, report)) => {
            rec.status = report.status;
            rec.residual = report.residual_norm;
            if let Ok(obs) = Observables::compute(&field, grid, device.material()) {
                rec.current = obs.mean_current();
                rec.current_deviation = obs.current_deviation();
                rec.min_f = obs.min_f;
            }
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// One assemble + solve per bias, run in parallel and returned in bias order.
/// Failures are recorded per point; NDR peaks are flagged.
pub fn iv_sweep(
    device: &dyn DeviceModel,
    biases: &[f64],
    policy: &ObservationPolicy,
    opts: &SolverOptions,
) -> Vec<IVRecord> {
    let mut out: Vec<IVRecord> = biases.par_iter().map(|&v| record(device, v, policy, opts)).collect();
    if let Some(ndr) = detect_ndr(&out) {
        out[ndr.peak_index].peak_flag = true;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NdrMetrics {
    pub peak_index: usize,
    pub peak_bias: f64,
    pub valley_index: usize,
    pub valley_bias: f64,
    pub peak_to_valley: f64,
}

/// First local maximum of the current whose prominence exceeds 5 % of the
/// largest current, and the lowest point after it before the curve climbs
/// back above the peak. Only successful points take part.
pub fn detect_ndr(records: &[IVRecord]) -> Option<NdrMetrics> {
    let pts: Vec<(usize, f64)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.status == SolveStatus::Success && r.current.is_finite())
        .map(|(i, r)| (i, r.current))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let jmax = pts.iter().fold(0.0f64, |a, p| a.max(p.1.abs()));
    for p in 1..pts.len() - 1 {
        let jp = pts[p].1;
        if !(jp >= pts[p - 1].1 && jp > pts[p + 1].1) {
            continue;
        }
        let mut left_min = jp;
        for q in (0..p).rev() {
            if pts[q].1 > jp {
                break;
            }
            left_min = left_min.min(pts[q].1);
        }
        let mut right_min = jp;
        let mut valley = p;
        for (q, pt) in pts.iter().enumerate().skip(p + 1) {
            if pt.1 > jp {
                break;
            }
            if pt.1 < right_min {
                right_min = pt.1;
                valley = q;
            }
        }
        let prominence = jp - left_min.max(right_min);
        if prominence > 0.05 * jmax {
            let (pi, vi) = (pts[p].0, pts[valley].0);
            return Some(NdrMetrics {
                peak_index: pi,
                peak_bias: records[pi].bias,
                valley_index: vi,
                valley_bias: records[vi].bias,
                peak_to_valley: jp / right_min,
            });
        }
    }
    None
}

/// Peak-to-valley ratio, or 1 when no NDR region is found.
pub fn peak_to_valley(records: &[IVRecord]) -> f64 {
    detect_ndr(records).map(|n| n.peak_to_valley).unwrap_or(1.0)
}
