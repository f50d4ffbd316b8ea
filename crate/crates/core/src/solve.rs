//! Direct banded LU, a preconditioned Krylov fallback, and the pinned-slice
//! least-squares solve used in measurement mode.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assembly::LinearSystem;
use crate::error::{Error, Result};

/// A solve is reported successful only at or below this relative residual.
pub const SUCCESS_RESIDUAL: f64 = 1e-10;
/// Above this relative residual a solve is near-singular outright.
pub const NEAR_SINGULAR_RESIDUAL: f64 = 1e-8;
/// Pivots smaller than this fraction of the largest matrix entry flag
/// near-singularity.
pub const PIVOT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Success,
    NearSingular,
    Unmeasurable,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Success => "success",
            SolveStatus::NearSingular => "near_singular",
            SolveStatus::Unmeasurable => "unmeasurable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// `||A f - b|| / ||b||`.
    pub residual_norm: f64,
    /// Ratio of the largest to the smallest pivot (direct) or singular value
    /// (slices).
    pub condition_estimate: Option<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
}

/// Solved `f(x_i, k_j)`, stored k-major within x.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerField {
    pub nx: usize,
    pub nk: usize,
    pub values: Vec<f64>,
    pub label: String,
}

impl WignerField {
    pub fn new(nx: usize, nk: usize, values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if values.len() != nx * nk {
            return Err(Error::DimensionMismatch {
                expected: nx * nk,
                found: values.len(),
            });
        }
        Ok(WignerField {
            nx,
            nk,
            values,
            label: label.into(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.nk + j]
    }

    /// The k profile at one x node.
    pub fn slice(&self, i: usize) -> &[f64] {
        &self.values[i * self.nk..(i + 1) * self.nk]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub kind: SolverKind,
    /// Krylov stopping tolerance on the relative residual.
    pub tol: f64,
    pub restart: usize,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            kind: SolverKind::Direct,
            tol: 1e-12,
            restart: 60,
            max_iterations: 3000,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_residual(system: &LinearSystem, x: &[f64]) -> f64 {
    let ax = system.matvec(x);
    let r: Vec<f64> = ax.iter().zip(&system.rhs).map(|(a, b)| a - b).collect();
    let nb = norm(&system.rhs);
    if nb == 0.0 {
        norm(&r)
    } else {
        norm(&r) / nb
    }
}

fn label(system: &LinearSystem) -> String {
    match system.slice {
        Some(i) => format!("{} slice {i}", system.mode),
        None => system.mode.to_string(),
    }
}

fn field_of(system: &LinearSystem, values: Vec<f64>) -> WignerField {
    WignerField {
        nx: system.dimension() / system.nk,
        nk: system.nk,
        values,
        label: label(system),
    }
}

/// LU factors of a banded matrix with partial pivoting. Row `r` stores
/// columns `r - kl ..= r + kl + ku`; the extra `kl` columns hold fill from
/// row interchanges, and the multipliers overwrite the eliminated entries.
struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
    pivots: Vec<usize>,
    min_pivot: f64,
    max_pivot: f64,
    max_entry: f64,
}

impl BandLu {
    #[inline]
    fn at(&self, r: usize, c: usize) -> usize {
        r * self.width + c + self.kl - r
    }

    fn factor(system: &LinearSystem) -> BandLu {
        let n = system.dimension();
        let (mut kl, mut ku) = (0usize, 0usize);
        for r in 0..n {
            for &c in system.row(r).0 {
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        let width = 2 * kl + ku + 1;
        let mut lu = BandLu {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
            pivots: vec![0; n],
            min_pivot: f64::INFINITY,
            max_pivot: 0.0,
            max_entry: 0.0,
        };
        let mut max_entry = 0.0f64;
        for r in 0..n {
            let (cols, vals) = system.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let idx = lu.at(r, c);
                lu.data[idx] = v;
                max_entry = max_entry.max(v.abs());
            }
        }
        lu.max_entry = max_entry;
        let tiny = max_entry * f64::EPSILON;
        for c in 0..n {
            let last = (c + kl).min(n - 1);
            // pivot: largest magnitude, lowest row index on ties
            let mut p = c;
            let mut best = lu.data[lu.at(c, c)].abs();
            for r in c + 1..=last {
                let v = lu.data[lu.at(r, c)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            lu.pivots[c] = p;
            let hi = (c + kl + ku).min(n - 1);
            if p != c {
                for col in c..=hi {
                    let (a, b) = (lu.at(c, col), lu.at(p, col));
                    lu.data.swap(a, b);
                }
            }
            lu.min_pivot = lu.min_pivot.min(best);
            lu.max_pivot = lu.max_pivot.max(best);
            let mut piv = lu.data[lu.at(c, c)];
            if piv == 0.0 {
                // keep going so a partial field can be inspected
                piv = tiny.max(f64::MIN_POSITIVE);
                let idx = lu.at(c, c);
                lu.data[idx] = piv;
            }
            let pivot_row_start = lu.at(c, c + 1);
            for r in c + 1..=last {
                let idx = lu.at(r, c);
                let v = lu.data[idx];
                if v == 0.0 {
                    continue;
                }
                let m = v / piv;
                lu.data[idx] = m;
                let len = hi - c;
                let target = lu.at(r, c + 1);
                let (head, tail) = lu.data.split_at_mut(target);
                let src = &head[pivot_row_start..pivot_row_start + len];
                for (t, s) in tail[..len].iter_mut().zip(src) {
                    *t -= m * s;
                }
            }
        }
        lu
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for c in 0..n {
            let p = self.pivots[c];
            if p != c {
                x.swap(c, p);
            }
            let xc = x[c];
            if xc != 0.0 {
                for r in c + 1..=(c + self.kl).min(n - 1) {
                    x[r] -= self.data[self.at(r, c)] * xc;
                }
            }
        }
        for c in (0..n).rev() {
            let hi = (c + self.kl + self.ku).min(n - 1);
            let mut s = x[c];
            for col in c + 1..=hi {
                s -= self.data[self.at(c, col)] * x[col];
            }
            x[c] = s / self.data[self.at(c, c)];
        }
        x
    }
}

fn classify(residual: f64, min_pivot: f64, finite: bool) -> SolveStatus {
    if finite && residual <= SUCCESS_RESIDUAL && min_pivot >= PIVOT_FLOOR {
        SolveStatus::Success
    } else {
        SolveStatus::NearSingular
    }
}

/// Banded LU with partial pivoting and up to three refinement steps.
pub fn solve_direct(system: &LinearSystem) -> Result<(WignerField, SolveReport)> {
    let n = system.dimension();
    if n == 0 || system.row_ptr.len() != n + 1 {
        return Err(Error::DimensionMismatch {
            expected: n + 1,
            found: system.row_ptr.len(),
        });
    }
    let lu = BandLu::factor(system);
    let mut x = lu.solve(&system.rhs);
    let mut residual = relative_residual(system, &x);
    let mut iterations = 0;
    while residual > SUCCESS_RESIDUAL && residual.is_finite() && iterations < 3 {
        let ax = system.matvec(&x);
        let r: Vec<f64> = system.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = lu.solve(&r);
        let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
        let tr = relative_residual(system, &trial);
        iterations += 1;
        if !(tr < residual) {
            break;
        }
        x = trial;
        residual = tr;
    }
    let finite = x.iter().all(|v| v.is_finite());
    let pivot_ratio = lu.min_pivot / lu.max_entry.max(f64::MIN_POSITIVE);
    let status = classify(residual, pivot_ratio, finite);
    let report = SolveReport {
        residual_norm: residual,
        condition_estimate: Some(lu.max_pivot / lu.min_pivot),
        iterations,
        status,
    };
    Ok((field_of(system, x), report))
}

/// Zero-fill incomplete LU on the CSR pattern.
struct Ilu0 {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<usize>,
}

impl Ilu0 {
    fn new(system: &LinearSystem) -> Result<Ilu0> {
        let n = system.dimension();
        let row_ptr = system.row_ptr.clone();
        let cols = system.cols.clone();
        let mut vals = system.vals.clone();
        let mut diag = vec![usize::MAX; n];
        for r in 0..n {
            for p in row_ptr[r]..row_ptr[r + 1] {
                if cols[p] == r {
                    diag[r] = p;
                }
            }
            if diag[r] == usize::MAX {
                return Err(Error::InvalidGrid(format!("row {r} has no diagonal entry")));
            }
        }
        for r in 1..n {
            for p in row_ptr[r]..row_ptr[r + 1] {
                let k = cols[p];
                if k >= r {
                    break;
                }
                let dk = vals[diag[k]];
                if dk == 0.0 {
                    continue;
                }
                vals[p] /= dk;
                let m = vals[p];
                // a_rj -= m * u_kj for j > k in the pattern of both rows
                let mut q = diag[k] + 1;
                for t in p + 1..row_ptr[r + 1] {
                    let c = cols[t];
                    while q < row_ptr[k + 1] && cols[q] < c {
                        q += 1;
                    }
                    if q < row_ptr[k + 1] && cols[q] == c {
                        vals[t] -= m * vals[q];
                    }
                }
            }
        }
        Ok(Ilu0 {
            row_ptr,
            cols,
            vals,
            diag,
        })
    }

    fn apply(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut x = b.to_vec();
        for r in 0..n {
            let mut s = x[r];
            for p in self.row_ptr[r]..self.diag[r] {
                s -= self.vals[p] * x[self.cols[p]];
            }
            x[r] = s;
        }
        for r in (0..n).rev() {
            let mut s = x[r];
            for p in self.diag[r] + 1..self.row_ptr[r + 1] {
                s -= self.vals[p] * x[self.cols[p]];
            }
            let d = self.vals[self.diag[r]];
            x[r] = if d != 0.0 { s / d } else { s };
        }
        x
    }
}

/// Restarted GMRES, right-preconditioned with ILU(0).
pub fn solve_iterative(system: &LinearSystem, opts: &SolverOptions) -> Result<(WignerField, SolveReport)> {
    let n = system.dimension();
    let pre = Ilu0::new(system)?;
    let bnorm = norm(&system.rhs).max(f64::MIN_POSITIVE);
    let m = opts.restart.max(2);
    let mut x = vec![0.0; n];
    let mut iterations = 0;
    'outer: while iterations < opts.max_iterations {
        let ax = system.matvec(&x);
        let r: Vec<f64> = system.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let beta = norm(&r);
        if beta / bnorm <= opts.tol {
            break;
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|a| a / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut used = 0;
        for k in 0..m {
            let z = pre.apply(&v[k]);
            let mut w = system.matvec(&z);
            for (i, vi) in v.iter().enumerate() {
                let hik: f64 = w.iter().zip(vi).map(|(a, b)| a * b).sum();
                h[i][k] = hik;
                for (wj, vj) in w.iter_mut().zip(vi) {
                    *wj -= hik * vj;
                }
            }
            let hn = norm(&w);
            h[k + 1][k] = hn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let d = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if d == 0.0 {
                break;
            }
            cs[k] = h[k][k] / d;
            sn[k] = h[k + 1][k] / d;
            h[k][k] = d;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            used = k + 1;
            iterations += 1;
            let done = g[k + 1].abs() / bnorm <= opts.tol || iterations >= opts.max_iterations;
            if hn != 0.0 && !done {
                v.push(w.iter().map(|a| a / hn).collect());
            }
            if done || hn == 0.0 {
                break;
            }
        }
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let mut s = g[i];
            for j in i + 1..used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        let mut update = vec![0.0; n];
        for (yi, vi) in y.iter().zip(&v) {
            for (u, a) in update.iter_mut().zip(vi) {
                *u += yi * a;
            }
        }
        let z = pre.apply(&update);
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi += zi;
        }
        if used == 0 {
            break 'outer;
        }
    }
    let residual = relative_residual(system, &x);
    let finite = x.iter().all(|v| v.is_finite());
    let status = classify(residual, f64::INFINITY, finite);
    let report = SolveReport {
        residual_norm: residual,
        condition_estimate: None,
        iterations,
        status,
    };
    Ok((field_of(system, x), report))
}

/// Dispatch on the configured solver.
pub fn solve(system: &LinearSystem, opts: &SolverOptions) -> Result<(WignerField, SolveReport)> {
    match opts.kind {
        SolverKind::Direct => solve_direct(system),
        SolverKind::Iterative => solve_iterative(system, opts),
    }
}

fn unmeasurable(system: &LinearSystem) -> (WignerField, SolveReport) {
    (
        field_of(system, vec![0.0; system.dimension()]),
        SolveReport {
            residual_norm: f64::NAN,
            condition_estimate: None,
            iterations: 0,
            status: SolveStatus::Unmeasurable,
        },
    )
}

/// Solve one pinned k-slice. The constraint matrix keeps a null space after
/// pinning, so the minimum-norm least-squares solution is returned.
pub fn solve_one_slice(system: &LinearSystem) -> (WignerField, SolveReport) {
    let n = system.dimension();
    let pinned = system.rhs.iter().any(|v| *v != 0.0);
    let has_force = system.retained_orders.first().is_some_and(|r| !r.is_empty());
    if !pinned || !has_force {
        return unmeasurable(system);
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    for r in 0..n {
        let (cols, vals) = system.row(r);
        for (c, v) in cols.iter().zip(vals) {
            a[(r, *c)] = *v;
        }
    }
    let b = DVector::from_column_slice(&system.rhs);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * n as f64 * f64::EPSILON;
    let kept = svd.singular_values.iter().filter(|s| **s > eps).copied();
    let smin = kept.fold(f64::INFINITY, f64::min);
    let x = match svd.solve(&b, eps) {
        Ok(x) => x,
        Err(_) => return unmeasurable(system),
    };
    let values: Vec<f64> = x.iter().copied().collect();
    let residual = relative_residual(system, &values);
    let finite = values.iter().all(|v| v.is_finite());
    let status = classify(residual, f64::INFINITY, finite);
    (
        field_of(system, values),
        SolveReport {
            residual_norm: residual,
            condition_estimate: Some(smax / smin),
            iterations: 0,
            status,
        },
    )
}

/// Solve every slice independently; slices without pins or without force
/// terms are unmeasurable.
pub fn solve_slice(slices: &[LinearSystem]) -> Vec<(WignerField, SolveReport)> {
    use rayon::prelude::*;
    slices.par_iter().map(solve_one_slice).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble, injection_values, ObservationPolicy};
    use crate::phasespace::{flat_potential, MaterialParams, PhaseGrid};

    fn system() -> (PhaseGrid, LinearSystem) {
        let g = PhaseGrid::new(0.4e-9, 0.05e9, 30, 16, true).unwrap();
        let u = flat_potential(&g, 0.0);
        let s = assemble(&g, &u, &MaterialParams::default(), &ObservationPolicy::classical()).unwrap();
        (g, s)
    }

    #[test]
    fn flat_classical_advects_injection() {
        let (g, s) = system();
        let (f, rep) = solve_direct(&s).unwrap();
        assert_eq!(rep.status, SolveStatus::Success);
        assert!(rep.residual_norm < 1e-12);
        let b = injection_values(&g, &MaterialParams::default());
        for i in 0..g.nx {
            for j in 0..g.nk {
                let want = if g.kappa(j) > 0.0 { b.left_values[j] } else { b.right_values[j] };
                assert!((f.get(i, j) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn iterative_agrees_with_direct() {
        let (_, s) = system();
        let (a, _) = solve_direct(&s).unwrap();
        let (b, rep) = solve_iterative(&s, &SolverOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Success);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-9 * a.max_abs());
        }
    }

    #[test]
    fn singular_matrix_is_flagged() {
        let (_, mut s) = system();
        // zero out an interior row entirely
        let r = 20 * 16 + 3;
        for p in s.row_ptr[r]..s.row_ptr[r + 1] {
            s.vals[p] = 0.0;
        }
        let (_, rep) = solve_direct(&s).unwrap();
        assert_eq!(rep.status, SolveStatus::NearSingular);
    }

    #[test]
    fn deterministic() {
        let (_, s) = system();
        let (a, _) = solve_direct(&s).unwrap();
        let (b, _) = solve_direct(&s).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
