//! Linear systems for the steady discretized Wigner–Moyal equation.
//!
//! Each interior row, scaled by `m dx / (hbar dk)`, reads
//!
//! ```text
//! kappa_j (f_i - f_{i-1})  -  sigma * sum_l R_i[l] f(i, j + l) = 0      (k > 0)
//! kappa_j (f_{i+1} - f_i)  -  sigma * sum_l R_i[l] f(i, j + l) = 0      (k < 0)
//! ```
//!
//! with `kappa_j = k_j / dk`, `sigma = m* q / (hbar dk)^2` per eV, and the
//! folded force coefficients
//! `R_i = sum_j (-1)^j C_{2j+1} dx^{2j+1} U^{(2j+1)}(x_i) a_{2j+1}` in eV.
//!
//! The odd-order terms of that series grow to ~1e35 on fine meshes before
//! factorial decay sets in, and they cancel. Double precision cannot sum them,
//! so every retained term is formed in exact fixed-point integer arithmetic
//! and each folded coefficient is rounded to `f64` once.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use dashu_float::{round::mode::HalfEven, FBig};
use dashu_int::IBig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phasespace::{ExactDerivative, MaterialParams, PhaseGrid, PotentialProfile, HBAR, Q};
use crate::stencil::{self, StencilTable};

/// A series order is kept when its magnitude exceeds this fraction of the
/// reference (j = 0) magnitude.
pub const TRUNCATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationMode {
    Classical,
    Windowed,
    Measurement,
}

impl fmt::Display for ObservationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObservationMode::Classical => "classical",
            ObservationMode::Windowed => "windowed",
            ObservationMode::Measurement => "measurement",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowSize {
    /// `round(1 / (dx dk))`.
    Auto,
    Fixed(usize),
}

impl fmt::Display for WindowSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowSize::Auto => f.write_str("auto"),
            WindowSize::Fixed(n) => write!(f, "{n}"),
        }
    }
}

/// Observation window per x node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPolicy {
    pub mode: ObservationMode,
    pub n_obs_default: WindowSize,
    /// `(x index, n_obs)` pairs replacing the default at single nodes.
    pub overrides: Vec<(usize, usize)>,
    pub j_max: Option<usize>,
}

/// Window at which the discretization is well posed: `round(1 / (dx dk))`.
pub fn n_uncertainty(grid: &PhaseGrid) -> usize {
    ((1.0 / grid.mesh_product()).round() as usize).max(1)
}

impl ObservationPolicy {
    pub fn classical() -> Self {
        ObservationPolicy {
            mode: ObservationMode::Classical,
            n_obs_default: WindowSize::Fixed(1),
            overrides: Vec::new(),
            j_max: Some(0),
        }
    }

    pub fn windowed(n: WindowSize) -> Self {
        ObservationPolicy {
            mode: ObservationMode::Windowed,
            n_obs_default: n,
            overrides: Vec::new(),
            j_max: None,
        }
    }

    pub fn auto() -> Self {
        Self::windowed(WindowSize::Auto)
    }

    /// The lowest-order scheme: every k-stencil is second-order accurate.
    pub fn unexpanded() -> Self {
        Self::windowed(WindowSize::Fixed(1))
    }

    pub fn measurement() -> Self {
        ObservationPolicy {
            mode: ObservationMode::Measurement,
            n_obs_default: WindowSize::Fixed(1),
            overrides: Vec::new(),
            j_max: None,
        }
    }

    pub fn with_override(mut self, x_index: usize, n_obs: usize) -> Self {
        self.overrides.push((x_index, n_obs));
        self
    }

    pub fn with_j_max(mut self, j_max: usize) -> Self {
        self.j_max = Some(j_max);
        self
    }

    pub fn label(&self) -> String {
        match self.mode {
            ObservationMode::Classical => "classical".into(),
            ObservationMode::Measurement => "measurement".into(),
            ObservationMode::Windowed => {
                let mut s = format!("window={}", self.n_obs_default);
                if !self.overrides.is_empty() {
                    s.push_str(&format!("+{}overrides", self.overrides.len()));
                }
                s
            }
        }
    }

    /// Series cap in measurement mode: `nk/2 - 1` unless configured.
    pub fn measurement_j_max(&self, grid: &PhaseGrid) -> usize {
        self.j_max.unwrap_or(grid.nk / 2 - 1)
    }

    /// Window at every x node.
    pub fn resolve(&self, grid: &PhaseGrid) -> Result<Vec<usize>> {
        let default = match self.n_obs_default {
            WindowSize::Auto => n_uncertainty(grid),
            WindowSize::Fixed(0) => return Err(Error::InvalidPolicy("n_obs must be at least 1".into())),
            WindowSize::Fixed(n) => n,
        };
        let mut out = vec![default; grid.nx];
        for &(i, n) in &self.overrides {
            if n == 0 {
                return Err(Error::InvalidPolicy(format!("override at x index {i} has n_obs = 0")));
            }
            let slot = out
                .get_mut(i)
                .ok_or_else(|| Error::InvalidPolicy(format!("override x index {i} outside 0..{}", grid.nx)))?;
            *slot = n;
        }
        Ok(out)
    }
}

/// Injected distribution at the two contacts, indexed by k node. Only the
/// entries with k > 0 (left) and k < 0 (right) are used.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionBoundary {
    pub left_values: Vec<f64>,
    pub right_values: Vec<f64>,
}

/// Thermally integrated Fermi occupation for a contact state of wavenumber `k`.
pub fn injection_value(material: &MaterialParams, k: f64) -> f64 {
    let m = material.mstar();
    let kt = material.thermal_energy();
    let e = HBAR * HBAR * k * k / (2.0 * m);
    let x = (e - material.fermi_level * Q) / kt;
    // ln(1 + e^{-x}) without overflow
    let softplus = if x > 0.0 { (-x).exp().ln_1p() } else { -x + x.exp().ln_1p() };
    m * kt / (std::f64::consts::PI * HBAR * HBAR) * softplus
}

pub fn injection_values(grid: &PhaseGrid, material: &MaterialParams) -> InjectionBoundary {
    let mut left = vec![0.0; grid.nk];
    let mut right = vec![0.0; grid.nk];
    for j in 0..grid.nk {
        let k = grid.k(j);
        if k > 0.0 {
            left[j] = injection_value(material, k);
        } else if k < 0.0 {
            right[j] = injection_value(material, k);
        }
    }
    InjectionBoundary {
        left_values: left,
        right_values: right,
    }
}

/// Keep order `j` iff `magnitudes[j] > tol * reference`. The reference is the
/// j = 0 magnitude, or `fallback` when that is zero, or the largest magnitude
/// when both are zero.
pub fn truncate_series(magnitudes: &[f64], fallback: Option<f64>) -> Vec<usize> {
    let first = magnitudes.first().copied().unwrap_or(0.0);
    let reference = if first > 0.0 {
        first
    } else {
        match fallback {
            Some(f) if f > 0.0 => f,
            _ => magnitudes.iter().copied().fold(0.0, f64::max),
        }
    };
    if reference <= 0.0 {
        return Vec::new();
    }
    magnitudes
        .iter()
        .enumerate()
        .filter(|(_, m)| **m > TRUNCATION_TOLERANCE * reference)
        .map(|(j, _)| j)
        .collect()
}

/// Folded force coefficients for every x node.
#[derive(Debug, Clone)]
pub struct ForceSeries {
    pub nk: usize,
    /// `R_i[l]` in eV for `l = 0..nk` (offset modulo nk); `None` when the
    /// node carries no force term.
    pub rows: Vec<Option<Vec<f64>>>,
    /// Retained series indices `j` per x node.
    pub retained: Vec<Vec<usize>>,
    /// Number of series orders examined before the scan stopped.
    pub scanned: usize,
    /// Fixed-point fraction bits used for the summation.
    pub precision_bits: usize,
}

impl ForceSeries {
    pub fn max_retained(&self) -> Option<usize> {
        self.retained.iter().filter_map(|r| r.last().copied()).max()
    }

    /// Largest k offset (either direction) coupled on row `i` before folding.
    pub fn reach(&self, i: usize, windows: Option<&[usize]>) -> usize {
        self.retained[i]
            .iter()
            .map(|&j| match windows {
                Some(w) if j < w[i] => w[i],
                _ => j + 1,
            })
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy)]
enum Series<'a> {
    Classical,
    Windowed { windows: &'a [usize], j_max: Option<usize> },
    Measurement { j_max: usize },
}

/// k-stencil for order `j` on a node with window `n`.
fn k_stencil(series: Series, j: usize, n: usize) -> Result<Arc<StencilTable>> {
    let d = 2 * j + 1;
    match series {
        Series::Windowed { .. } if j < n => stencil::make_stencil(d, 2 * n - 2 * j),
        _ => stencil::make_stencil(d, 2),
    }
}

struct Order {
    derivative: ExactDerivative,
    /// log2 of the magnitude `|C U_d| * max|a|` per x node.
    log_mag: Vec<f64>,
}

fn log2c(j: usize, mp: f64) -> f64 {
    stencil::ln_nonlocal_power(2 * j + 1, mp) / std::f64::consts::LN_2
}

fn fixed_to_f64(x: &IBig, frac_bits: usize) -> f64 {
    if *x == IBig::ZERO {
        return 0.0;
    }
    FBig::<HalfEven, 2>::from_parts(x.clone(), -(frac_bits as isize)).to_f64().value()
}

fn force_series(grid: &PhaseGrid, potential: &PotentialProfile, series: Series) -> Result<ForceSeries> {
    let nx = grid.nx;
    if potential.len() != nx {
        return Err(Error::InvalidGrid(format!(
            "potential has {} samples, grid has {nx} x nodes",
            potential.len()
        )));
    }
    let mp = grid.mesh_product();
    let log_tol = TRUNCATION_TOLERANCE.log2();
    let max_order = stencil::global_cache().max_combined_order();
    let windows: Vec<usize> = match series {
        Series::Windowed { windows, .. } => windows.to_vec(),
        _ => vec![1; nx],
    };
    let max_window = windows.iter().copied().max().unwrap_or(1);
    if let Series::Windowed { .. } = series {
        if 2 * max_window + 1 > max_order {
            return Err(Error::OrderOverflow {
                derivative: 1,
                accuracy: 2 * max_window,
                max: max_order,
            });
        }
        let mut distinct: Vec<usize> = windows.clone();
        distinct.sort_unstable();
        distinct.dedup();
        for n in distinct {
            if n > 1 {
                stencil::global_cache().odd_family(n, 2 * n - 1)?;
            }
        }
    }
    let cap = match series {
        Series::Classical => Some(0),
        Series::Windowed { j_max, .. } => j_max,
        Series::Measurement { j_max } => Some(j_max),
    };
    let u_range = {
        let v = potential.values();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // the linear end extension can exceed the sampled range near the ends
        let ends = (v[1] - v[0]).abs().max((v[nx - 1] - v[nx - 2]).abs());
        (hi - lo) + ends * (max_order as f64)
    };

    let mut orders: Vec<Order> = Vec::new();
    let mut refs: Vec<f64> = Vec::new();
    let mut min_ref = f64::INFINITY;
    let mut prev_bound = f64::INFINITY;
    let mut running_max = f64::NEG_INFINITY;
    let mut j = 0usize;
    loop {
        let d = 2 * j + 1;
        if d + 2 > max_order {
            // Out of stencil orders: fine only if the last order was negligible.
            let last = orders.last().map(|o| o.log_mag.as_slice()).unwrap_or(&[]);
            let live = last
                .iter()
                .zip(&refs)
                .any(|(m, r)| m.is_finite() && *m > r + log_tol);
            if live {
                return Err(Error::OrderOverflow {
                    derivative: d,
                    accuracy: 2,
                    max: max_order,
                });
            }
            break;
        }
        let derivative = potential.undivided_exact(d)?;
        let lc = log2c(j, mp);
        let mut log_mag = vec![f64::NEG_INFINITY; nx];
        for i in 0..nx {
            if !derivative.is_zero(i) {
                let a = k_stencil(series, j, windows[i])?;
                log_mag[i] = lc + derivative.log2_abs(i) + a.max_abs().log2();
                running_max = running_max.max(log_mag[i]);
            }
        }
        orders.push(Order { derivative, log_mag });
        if j == 0 {
            let global = orders[0].log_mag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            refs = orders[0]
                .log_mag
                .iter()
                .map(|m| if m.is_finite() { *m } else { global })
                .collect();
            min_ref = refs.iter().copied().filter(|r| r.is_finite()).fold(f64::INFINITY, f64::min);
        }
        if cap.is_some_and(|c| j >= c) {
            break;
        }
        if cap.is_none() && j + 1 >= max_window {
            // Every row now uses the minimal stencils; bound all later orders.
            let a = stencil::make_stencil(d, 2)?;
            let bound = lc + a.weight_sum().log2() + u_range.log2() + a.max_abs().log2();
            let floor = if min_ref.is_finite() { min_ref } else { running_max };
            if bound < prev_bound && bound < floor + log_tol - 10.0 {
                break;
            }
            prev_bound = bound;
        }
        j += 1;
    }
    let scanned = orders.len();

    // Per-node retained orders.
    let retained: Vec<Vec<usize>> = (0..nx)
        .map(|i| {
            let mags: Vec<f64> = orders.iter().map(|o| o.log_mag[i]).collect();
            let reference = if refs[i].is_finite() {
                refs[i]
            } else {
                mags.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            if !reference.is_finite() {
                return Vec::new();
            }
            (0..scanned).filter(|&j| mags[j] > reference + log_tol).collect()
        })
        .collect();

    // Fixed-point precision from the largest retained term and stencil entry.
    let mut need = 0.0f64;
    for (i, r) in retained.iter().enumerate() {
        for &j in r {
            let la = k_stencil(series, j, windows[i])?.max_abs().log2();
            need = need.max(la).max(orders[j].log_mag[i] - la);
        }
    }
    let frac_bits = (((need.max(0.0) + 140.0) / 64.0).ceil() as usize) * 64;

    // Signed fixed-point C_j U_d per (j, i).
    let used_orders: Vec<bool> = (0..scanned).map(|j| retained.iter().any(|r| r.contains(&j))).collect();
    let coeff: Vec<Vec<IBig>> = (0..scanned)
        .into_par_iter()
        .map(|j| {
            if !used_orders[j] {
                return Vec::new();
            }
            let der = &orders[j].derivative;
            let top = (0..nx)
                .filter(|&i| !der.is_zero(i))
                .map(|i| der.log2_abs(i))
                .fold(0.0f64, f64::max);
            let guard = top.max(0.0).ceil() as usize + 4;
            let c = stencil::nonlocal_power_fixed(2 * j + 1, mp, frac_bits + guard);
            let den = der.denominator.clone() << (der.shift + guard);
            (0..nx)
                .map(|i| {
                    if der.is_zero(i) {
                        return IBig::ZERO;
                    }
                    let v = &c * &der.numerators[i] / &den;
                    if j % 2 == 1 {
                        -v
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();

    // Folded fixed-point stencils, keyed by (derivative, accuracy).
    let mut needed: BTreeMap<(usize, usize), Arc<StencilTable>> = BTreeMap::new();
    for (i, r) in retained.iter().enumerate() {
        for &j in r {
            let t = k_stencil(series, j, windows[i])?;
            needed.insert((t.derivative_order(), t.accuracy_order()), t);
        }
    }
    let nk = grid.nk;
    let folded: HashMap<(usize, usize), Vec<IBig>> = needed
        .into_par_iter()
        .map(|(key, t)| {
            let mut out = vec![IBig::ZERO; nk];
            let p = t.half_width() as isize;
            for (s, a) in t.exact().iter().enumerate() {
                if !a.is_zero() {
                    let l = (s as isize - p).rem_euclid(nk as isize) as usize;
                    out[l] += a.to_fixed(frac_bits);
                }
            }
            (key, out)
        })
        .collect();

    let rows: Vec<Option<Vec<f64>>> = (0..nx)
        .into_par_iter()
        .map(|i| {
            if retained[i].is_empty() {
                return None;
            }
            let mut acc = vec![IBig::ZERO; nk];
            for &j in &retained[i] {
                let c = &coeff[j][i];
                if *c == IBig::ZERO {
                    continue;
                }
                let t = k_stencil(series, j, windows[i]).expect("stencil generated above");
                let a = &folded[&(t.derivative_order(), t.accuracy_order())];
                for (slot, al) in acc.iter_mut().zip(a) {
                    if *al != IBig::ZERO {
                        *slot += c * al;
                    }
                }
            }
            Some(acc.iter().map(|v| fixed_to_f64(v, 2 * frac_bits)).collect())
        })
        .collect();

    Ok(ForceSeries {
        nk,
        rows,
        retained,
        scanned,
        precision_bits: frac_bits,
    })
}

/// Force coefficients for a full-grid policy (classical or windowed).
pub fn force_coefficients(grid: &PhaseGrid, potential: &PotentialProfile, policy: &ObservationPolicy) -> Result<ForceSeries> {
    match policy.mode {
        ObservationMode::Classical => force_series(grid, potential, Series::Classical),
        ObservationMode::Windowed => {
            let windows = policy.resolve(grid)?;
            force_series(
                grid,
                potential,
                Series::Windowed {
                    windows: &windows,
                    j_max: policy.j_max,
                },
            )
        }
        ObservationMode::Measurement => force_series(
            grid,
            potential,
            Series::Measurement {
                j_max: policy.measurement_j_max(grid),
            },
        ),
    }
}

/// Sparse square system in compressed-row form.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub nx: usize,
    pub nk: usize,
    pub mode: ObservationMode,
    /// x index of a measurement slice; `None` for full-grid systems.
    pub slice: Option<usize>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    pub rhs: Vec<f64>,
    /// Retained series orders per x node (one entry for a slice).
    pub retained_orders: Vec<Vec<usize>>,
}

impl LinearSystem {
    fn from_rows(
        nx: usize,
        nk: usize,
        mode: ObservationMode,
        slice: Option<usize>,
        rows: Vec<Vec<(usize, f64)>>,
        rhs: Vec<f64>,
        retained_orders: Vec<Vec<usize>>,
    ) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let total = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(total);
        let mut vals = Vec::with_capacity(total);
        row_ptr.push(0);
        for r in rows {
            for (c, v) in r {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        LinearSystem {
            nx,
            nk,
            mode,
            slice,
            row_ptr,
            cols,
            vals,
            rhs,
            retained_orders,
        }
    }

    pub fn dimension(&self) -> usize {
        self.rhs.len()
    }

    /// Stored nonzero count.
    pub fn nz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map(|p| vals[p]).unwrap_or(0.0)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dimension())
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(c, v)| v * x[*c]).sum()
            })
            .collect()
    }

    /// Same sparsity pattern and bit-identical values.
    pub fn entries_equal(&self, other: &LinearSystem) -> bool {
        self.row_ptr == other.row_ptr
            && self.cols == other.cols
            && self.rhs.iter().map(|v| v.to_bits()).eq(other.rhs.iter().map(|v| v.to_bits()))
            && self.vals.iter().map(|v| v.to_bits()).eq(other.vals.iter().map(|v| v.to_bits()))
    }

    /// Text dump: header `%%moyal nx nk mode`, then 0-based `row col value`.
    pub fn write_matrix<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "%%moyal {} {} {}", self.nx, self.nk, self.mode)?;
        for r in 0..self.dimension() {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                writeln!(w, "{r} {c} {v:e}")?;
            }
        }
        Ok(())
    }

    pub fn dump_matrix(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_matrix(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

/// Per eV scale of the force term in a row normalised by `m dx / (hbar dk)`.
fn force_scale(grid: &PhaseGrid, material: &MaterialParams) -> f64 {
    material.mstar() * Q / (HBAR * HBAR * grid.dk * grid.dk)
}

fn build_transport(
    grid: &PhaseGrid,
    material: &MaterialParams,
    boundary: &InjectionBoundary,
    force: &ForceSeries,
    mode: ObservationMode,
) -> Result<LinearSystem> {
    let (nx, nk) = (grid.nx, grid.nk);
    if boundary.left_values.len() != nk || boundary.right_values.len() != nk {
        return Err(Error::DimensionMismatch {
            expected: nk,
            found: boundary.left_values.len().min(boundary.right_values.len()),
        });
    }
    let sigma = force_scale(grid, material);
    let blocks: Vec<(Vec<Vec<(usize, f64)>>, Vec<f64>)> = (0..nx)
        .into_par_iter()
        .map(|i| {
            let mut rows = Vec::with_capacity(nk);
            let mut rhs = vec![0.0; nk];
            let force = force.rows[i].as_ref();
            for j in 0..nk {
                let r = grid.index(i, j);
                let kappa = grid.kappa(j);
                if i == 0 && kappa > 0.0 {
                    rows.push(vec![(r, 1.0)]);
                    rhs[j] = boundary.left_values[j];
                    continue;
                }
                if i == nx - 1 && kappa < 0.0 {
                    rows.push(vec![(r, 1.0)]);
                    rhs[j] = boundary.right_values[j];
                    continue;
                }
                let mut entries: BTreeMap<usize, f64> = BTreeMap::new();
                if kappa > 0.0 {
                    entries.insert(r, kappa);
                    entries.insert(r - nk, -kappa);
                } else if kappa < 0.0 {
                    entries.insert(r + nk, kappa);
                    entries.insert(r, -kappa);
                }
                if let Some(row) = force {
                    for (l, v) in row.iter().enumerate() {
                        if *v != 0.0 {
                            let c = grid.index(i, (j + l) % nk);
                            *entries.entry(c).or_insert(0.0) -= sigma * v;
                        }
                    }
                }
                rows.push(entries.into_iter().collect());
            }
            (rows, rhs)
        })
        .collect();
    let mut rows = Vec::with_capacity(nx * nk);
    let mut rhs = Vec::with_capacity(nx * nk);
    for (b, r) in blocks {
        rows.extend(b);
        rhs.extend(r);
    }
    Ok(LinearSystem::from_rows(nx, nk, mode, None, rows, rhs, force.retained.clone()))
}

/// Upwind transport balanced against the first-order force term only.
pub fn assemble_classical(
    grid: &PhaseGrid,
    potential: &PotentialProfile,
    material: &MaterialParams,
    boundary: &InjectionBoundary,
) -> Result<LinearSystem> {
    let force = force_series(grid, potential, Series::Classical)?;
    build_transport(grid, material, boundary, &force, ObservationMode::Classical)
}

/// Full Moyal series with observation windows.
pub fn assemble_windowed(
    grid: &PhaseGrid,
    potential: &PotentialProfile,
    material: &MaterialParams,
    policy: &ObservationPolicy,
    boundary: &InjectionBoundary,
) -> Result<LinearSystem> {
    if policy.mode != ObservationMode::Windowed {
        return Err(Error::InvalidPolicy(format!("windowed assembly given a {} policy", policy.mode)));
    }
    let force = force_coefficients(grid, potential, policy)?;
    build_transport(grid, material, boundary, &force, ObservationMode::Windowed)
}

/// Dispatch on the policy mode for full-grid systems.
pub fn assemble(
    grid: &PhaseGrid,
    potential: &PotentialProfile,
    material: &MaterialParams,
    policy: &ObservationPolicy,
) -> Result<LinearSystem> {
    let boundary = injection_values(grid, material);
    match policy.mode {
        ObservationMode::Classical => assemble_classical(grid, potential, material, &boundary),
        ObservationMode::Windowed => assemble_windowed(grid, potential, material, policy, &boundary),
        ObservationMode::Measurement => Err(Error::InvalidPolicy(
            "measurement mode produces per-slice systems; use assemble_measurement".into(),
        )),
    }
}

/// Dirichlet pin of one phase-space node in measurement mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pin {
    pub x_index: usize,
    pub k_index: usize,
    pub value: f64,
}

/// One `nk x nk` constraint system per x node. Slices without pins keep their
/// homogeneous rows; slices whose force series vanishes carry no entries at
/// all apart from pins and are reported unmeasurable by the solver.
pub fn assemble_measurement(
    grid: &PhaseGrid,
    potential: &PotentialProfile,
    policy: &ObservationPolicy,
    pins: &[Pin],
) -> Result<Vec<LinearSystem>> {
    if policy.mode != ObservationMode::Measurement {
        return Err(Error::InvalidPolicy(format!("measurement assembly given a {} policy", policy.mode)));
    }
    if pins.is_empty() {
        return Err(Error::InvalidPolicy("measurement mode needs at least one pin".into()));
    }
    for p in pins {
        if p.x_index >= grid.nx || p.k_index >= grid.nk {
            return Err(Error::OutOfDomain(format!("pin ({}, {}) outside the grid", p.x_index, p.k_index)));
        }
    }
    let force = force_coefficients(grid, potential, policy)?;
    let nk = grid.nk;
    Ok((0..grid.nx)
        .map(|i| {
            let pinned: HashMap<usize, f64> = pins.iter().filter(|p| p.x_index == i).map(|p| (p.k_index, p.value)).collect();
            let scale = force.rows[i]
                .as_ref()
                .map(|r| r.iter().fold(0.0f64, |a, v| a.max(v.abs())))
                .unwrap_or(0.0);
            let mut rows = Vec::with_capacity(nk);
            let mut rhs = vec![0.0; nk];
            for j in 0..nk {
                if let Some(v) = pinned.get(&j) {
                    rows.push(vec![(j, 1.0)]);
                    rhs[j] = *v;
                    continue;
                }
                let mut entries: BTreeMap<usize, f64> = BTreeMap::new();
                if let Some(row) = force.rows[i].as_ref().filter(|_| scale > 0.0) {
                    for (l, v) in row.iter().enumerate() {
                        if *v != 0.0 {
                            *entries.entry((j + l) % nk).or_insert(0.0) += v / scale;
                        }
                    }
                }
                rows.push(entries.into_iter().collect());
            }
            LinearSystem::from_rows(
                1,
                nk,
                ObservationMode::Measurement,
                Some(i),
                rows,
                rhs,
                vec![force.retained[i].clone()],
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasespace::{flat_potential, linear_potential, rtd_potential, DeviceGeometry};

    fn small_grid() -> PhaseGrid {
        PhaseGrid::new(0.4e-9, 0.05e9, 40, 16, true).unwrap()
    }

    #[test]
    fn auto_window_resolves_to_uncertainty() {
        let g = PhaseGrid::new(0.4e-9, 0.05e9, 250, 128, true).unwrap();
        assert_eq!(n_uncertainty(&g), 50);
        let w = ObservationPolicy::auto().with_override(7, 22).resolve(&g).unwrap();
        assert_eq!(w[7], 22);
        assert_eq!(w[6], 50);
        assert!(ObservationPolicy::auto().with_override(7, 0).resolve(&g).is_err());
    }

    #[test]
    fn truncation_rule() {
        assert_eq!(truncate_series(&[1.0, 0.0, 0.0], None), vec![0]);
        assert!(truncate_series(&[0.0, 0.0], None).is_empty());
        assert_eq!(truncate_series(&[1.0, 2e-6, 5e-7, 3.0], None), vec![0, 1, 3]);
        assert_eq!(truncate_series(&[0.0, 1.0, 1e-7], Some(2.0)), vec![1]);
        assert_eq!(truncate_series(&[0.0, 1.0, 1e-7], None), vec![1]);
    }

    #[test]
    fn injection_at_fermi_level() {
        let m = MaterialParams::default();
        let kf = (2.0 * m.mstar() * m.fermi_level * Q).sqrt() / HBAR;
        let want = m.mstar() * m.thermal_energy() / (std::f64::consts::PI * HBAR * HBAR) * 2f64.ln();
        assert!((injection_value(&m, kf) - want).abs() < 1e-12 * want);
        let g = PhaseGrid::new(0.4e-9, 0.05e9, 10, 128, true).unwrap();
        let b = injection_values(&g, &m);
        for j in 0..128 {
            assert_eq!(b.left_values[j], b.right_values[127 - j]);
        }
    }

    #[test]
    fn linear_potential_retains_only_first_order() {
        let g = small_grid();
        let u = PotentialProfile::new((0..g.nx).map(|i| i as f64 / 64.0).collect(), g.dx);
        let f = force_coefficients(&g, &u, &ObservationPolicy::auto()).unwrap();
        assert!(f.retained.iter().all(|r| r == &vec![0]));
        let flat = flat_potential(&g, 0.2);
        let f = force_coefficients(&g, &flat, &ObservationPolicy::auto()).unwrap();
        assert!(f.retained.iter().all(Vec::is_empty));
    }

    #[test]
    fn linear_potential_windowed_equals_classical() {
        let g = PhaseGrid::new(1e-9, 1e9, 20, 16, true).unwrap();
        let m = MaterialParams::default();
        let u = linear_potential(&g, -0.01 / 1e-9, 0.1);
        let b = injection_values(&g, &m);
        let c = assemble_classical(&g, &u, &m, &b).unwrap();
        let w = assemble_windowed(&g, &u, &m, &ObservationPolicy::auto(), &b).unwrap();
        assert!(c.entries_equal(&w));
    }

    #[test]
    fn force_annihilates_k_constant_fields() {
        let g = PhaseGrid::new(0.4e-9, 0.05e9, 178, 16, true).unwrap();
        let u = rtd_potential(&g, &DeviceGeometry::default(), 0.1).unwrap();
        let f = force_coefficients(&g, &u, &ObservationPolicy::windowed(WindowSize::Fixed(3))).unwrap();
        for row in f.rows.iter().flatten() {
            let s: f64 = row.iter().sum();
            let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(s.abs() <= 1e-12 * scale, "row sum {s} vs {scale}");
        }
    }

    #[test]
    fn classical_row_shape() {
        let g = small_grid();
        let m = MaterialParams::default();
        let u = linear_potential(&g, 1e7, 0.0);
        let sys = assemble_classical(&g, &u, &m, &injection_values(&g, &m)).unwrap();
        for r in 0..sys.dimension() {
            assert!(sys.row(r).0.len() <= 5);
        }
        let (i, j) = (5, 12);
        let r = g.index(i, j);
        assert_eq!(sys.get(r, r - g.nk), -g.kappa(j));
    }

    #[test]
    fn window_span_matches_policy() {
        let g = PhaseGrid::new(0.4e-9, 0.05e9, 178, 128, true).unwrap();
        let u = rtd_potential(&g, &DeviceGeometry::default(), 0.0).unwrap();
        let p = ObservationPolicy::windowed(WindowSize::Fixed(5)).with_j_max(3);
        let f = force_coefficients(&g, &u, &p).unwrap();
        let w = p.resolve(&g).unwrap();
        let barrier = 75;
        assert_eq!(f.reach(barrier, Some(&w)), 5);
    }

    #[test]
    fn measurement_pins_become_identity_rows() {
        let g = small_grid();
        let u = crate::phasespace::random_potential(3, 0.5, &g).unwrap();
        let pins = [Pin { x_index: 10, k_index: 8, value: 1.0 }];
        let slices = assemble_measurement(&g, &u, &ObservationPolicy::measurement(), &pins).unwrap();
        assert_eq!(slices.len(), g.nx);
        let s = &slices[10];
        assert_eq!(s.row(8).0, &[8]);
        assert_eq!(s.rhs[8], 1.0);
        assert!(assemble_measurement(&g, &u, &ObservationPolicy::measurement(), &[]).is_err());
    }

    #[test]
    fn dump_has_header() {
        let g = small_grid();
        let m = MaterialParams::default();
        let u = flat_potential(&g, 0.0);
        let sys = assemble_classical(&g, &u, &m, &injection_values(&g, &m)).unwrap();
        let mut buf = Vec::new();
        sys.write_matrix(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("%%moyal 40 16 classical\n"));
        assert_eq!(text.lines().count(), 1 + sys.nz());
    }
}
