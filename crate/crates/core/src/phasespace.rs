//! Phase-space mesh, material constants, device geometries and potentials.
//!
//! Everything is SI internally except energies, which stay in eV.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, OnceLock, RwLock};

use dashu_int::IBig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stencil::{self, decompose};

/// Reduced Planck constant, J s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Electron rest mass, kg.
pub const M0: f64 = 9.109_383_7015e-31;
/// Boltzmann constant, J/K.
pub const KB: f64 = 1.380_649e-23;
/// Elementary charge, C.
pub const Q: f64 = 1.602_176_634e-19;

/// Uniform `(x, k)` mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    pub dx: f64,
    pub dk: f64,
    pub nx: usize,
    pub nk: usize,
    /// Half-cell shift of the k nodes so that none sits at k = 0.
    pub k_offset: bool,
    pub x0: f64,
}

impl PhaseGrid {
    pub fn new(dx: f64, dk: f64, nx: usize, nk: usize, k_offset: bool) -> Result<Self> {
        if !(dx > 0.0 && dx.is_finite()) || !(dk > 0.0 && dk.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacings must be positive, got dx={dx}, dk={dk}")));
        }
        if nx < 4 || nk < 4 || nk % 2 == 1 {
            return Err(Error::InvalidGrid(format!(
                "need nx >= 4 and even nk >= 4, got nx={nx}, nk={nk}"
            )));
        }
        Ok(PhaseGrid {
            dx,
            dk,
            nx,
            nk,
            k_offset,
            x0: 0.0,
        })
    }

    pub fn with_origin(mut self, x0: f64) -> Self {
        self.x0 = x0;
        self
    }

    /// Dimensionless `dx * dk`.
    pub fn mesh_product(&self) -> f64 {
        self.dx * self.dk
    }

    pub fn len(&self) -> usize {
        self.nx * self.nk
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.dx
    }

    pub fn k(&self, j: usize) -> f64 {
        self.kappa(j) * self.dk
    }

    /// `k_j / dk`: a half-integer on offset grids.
    pub fn kappa(&self, j: usize) -> f64 {
        let shift = if self.k_offset { 0.5 } else { 0.0 };
        j as f64 - (self.nk / 2) as f64 + shift
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn ks(&self) -> Vec<f64> {
        (0..self.nk).map(|j| self.k(j)).collect()
    }

    /// Row of node `(i, j)` in k-major-within-x ordering.
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.nk + j
    }

    pub fn node(&self, row: usize) -> (usize, usize) {
        (row / self.nk, row % self.nk)
    }

    /// Index of the k node nearest to `k`; ties go to the positive side.
    pub fn nearest_k_index(&self, k: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for j in 0..self.nk {
            let dist = (self.k(j) - k).abs();
            let closer = dist < best_dist - 1e-12 * self.dk;
            let tie = (dist - best_dist).abs() <= 1e-12 * self.dk && self.k(j) > self.k(best);
            if closer || tie {
                best = j;
                best_dist = dist;
            }
        }
        best
    }

    /// Index of the x node nearest to `x`, if inside the mesh.
    pub fn x_index(&self, x: f64) -> Option<usize> {
        let r = ((x - self.x0) / self.dx).round();
        (r >= 0.0 && r <= (self.nx - 1) as f64).then_some(r as usize)
    }
}

/// Effective-mass material and contact parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaterialParams {
    pub mstar_rel: f64,
    /// Kelvin.
    pub temperature: f64,
    /// Contact Fermi level in eV.
    pub fermi_level: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            mstar_rel: 0.07,
            temperature: 77.0,
            fermi_level: 0.05,
        }
    }
}

impl MaterialParams {
    pub fn new(mstar_rel: f64, temperature: f64, fermi_level: f64) -> Result<Self> {
        for (name, v) in [("mstar_rel", mstar_rel), ("temperature", temperature), ("fermi_level", fermi_level)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(MaterialParams {
            mstar_rel,
            temperature,
            fermi_level,
        })
    }

    /// Effective mass in kg.
    pub fn mstar(&self) -> f64 {
        self.mstar_rel * M0
    }

    /// `k_B T` in joules.
    pub fn thermal_energy(&self) -> f64 {
        KB * self.temperature
    }
}

/// Double-barrier device layout. Lengths in metres, heights in eV.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeviceGeometry {
    pub total_length: f64,
    pub barrier_height: f64,
    pub barrier_width: f64,
    pub well_width: f64,
    pub spacer_width: f64,
}

impl Default for DeviceGeometry {
    /// 8-cell barriers and a 12-cell well at 0.4 nm spacing with 30 nm contacts.
    fn default() -> Self {
        DeviceGeometry {
            total_length: 71.2e-9,
            barrier_height: 0.3,
            barrier_width: 3.2e-9,
            well_width: 4.8e-9,
            spacer_width: 30e-9,
        }
    }
}

/// Node ranges of a resolved double-barrier layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RtdLayout {
    pub left_barrier: Range<usize>,
    pub well: Range<usize>,
    pub right_barrier: Range<usize>,
}

impl RtdLayout {
    /// First to last barrier node, inclusive.
    pub fn active(&self) -> Range<usize> {
        self.left_barrier.start..self.right_barrier.end
    }
}

fn cells(width: f64, dx: f64, what: &str) -> Result<usize> {
    let n = width / dx;
    let r = n.round();
    if (n - r).abs() > 1e-9 * n.abs().max(1.0) {
        return Err(Error::GeometryMismatch(format!(
            "{what} {:.4} nm is not a multiple of dx = {:.4} nm",
            width * 1e9,
            dx * 1e9
        )));
    }
    Ok(r as usize)
}

impl DeviceGeometry {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.barrier_height, self.barrier_width, self.well_width, self.spacer_width];
        if parts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(self.total_length > 0.0) {
            return Err(Error::GeometryMismatch("negative or non-finite geometry".into()));
        }
        let used = 2.0 * self.barrier_width + self.well_width + 2.0 * self.spacer_width;
        if used > self.total_length * (1.0 + 1e-9) {
            return Err(Error::GeometryMismatch(format!(
                "layers span {:.4} nm but the device is {:.4} nm",
                used * 1e9,
                self.total_length * 1e9
            )));
        }
        Ok(())
    }

    /// Place the layers on the grid, each node owning one cell of width dx.
    /// Any slack is split between the two contacts.
    pub fn layout(&self, grid: &PhaseGrid) -> Result<RtdLayout> {
        self.validate()?;
        let nb = cells(self.barrier_width, grid.dx, "barrier width")?;
        let nw = cells(self.well_width, grid.dx, "well width")?;
        let ns = cells(self.spacer_width, grid.dx, "spacer width")?;
        let nl = cells(self.total_length, grid.dx, "device length")?;
        if nl > grid.nx {
            return Err(Error::GeometryMismatch(format!(
                "device needs {nl} cells, grid has {}",
                grid.nx
            )));
        }
        let used = 2 * (nb + ns) + nw;
        let left = ns + (grid.nx - used) / 2;
        Ok(RtdLayout {
            left_barrier: left..left + nb,
            well: left + nb..left + nb + nw,
            right_barrier: left + nb + nw..left + 2 * nb + nw,
        })
    }
}

/// Potential energy samples `U(x_i)` in eV with lazily cached derivatives.
#[derive(Debug)]
pub struct PotentialProfile {
    values: Vec<f64>,
    dx: f64,
    fixed: OnceLock<(Vec<IBig>, usize)>,
    cache: RwLock<HashMap<usize, Arc<Vec<f64>>>>,
}

impl Clone for PotentialProfile {
    fn clone(&self) -> Self {
        PotentialProfile::new(self.values.clone(), self.dx)
    }
}

impl PartialEq for PotentialProfile {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values && self.dx == other.dx
    }
}

/// Undivided derivative `h^d U^(d)` at every node, exactly:
/// `value_i = numerators[i] / (denominator * 2^shift)`.
#[derive(Debug, Clone)]
pub struct ExactDerivative {
    pub numerators: Vec<IBig>,
    pub denominator: IBig,
    pub shift: usize,
}

impl ExactDerivative {
    pub fn is_zero(&self, i: usize) -> bool {
        self.numerators[i] == IBig::ZERO
    }

    pub fn to_f64(&self, i: usize) -> f64 {
        stencil::Rational::new(self.numerators[i].clone(), self.denominator.clone() << self.shift).to_f64()
    }

    /// `log2 |value_i|`, or `-inf` for an exact zero.
    pub fn log2_abs(&self, i: usize) -> f64 {
        if self.is_zero(i) {
            return f64::NEG_INFINITY;
        }
        log2_big(&self.numerators[i]) - log2_big(&self.denominator) - self.shift as f64
    }
}

/// `log2 |x|` of a nonzero big integer, accurate to ~1e-15 relative.
pub(crate) fn log2_big(x: &IBig) -> f64 {
    let bits = stencil::bit_length(x);
    if bits <= 1000 {
        let v = stencil::Rational::new(x.clone(), IBig::ONE).to_f64();
        v.abs().log2()
    } else {
        let top = x.clone() >> (bits - 64);
        let v = stencil::Rational::new(top, IBig::ONE).to_f64();
        v.abs().log2() + (bits - 64) as f64
    }
}

impl PotentialProfile {
    pub fn new(values: Vec<f64>, dx: f64) -> Self {
        PotentialProfile {
            values,
            dx,
            fixed: OnceLock::new(),
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Replace the samples; cached derivatives are dropped.
    pub fn set_values(&mut self, values: Vec<f64>) {
        self.values = values;
        self.fixed = OnceLock::new();
        self.cache.write().unwrap().clear();
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Samples as exact integers over a common power of two.
    fn fixed(&self) -> &(Vec<IBig>, usize) {
        self.fixed.get_or_init(|| {
            let shift = self
                .values
                .iter()
                .filter(|v| **v != 0.0)
                .map(|v| (-decompose(*v).1).max(0) as usize)
                .max()
                .unwrap_or(0);
            let ints = self
                .values
                .iter()
                .map(|&v| {
                    let (m, e) = decompose(v);
                    let mag = IBig::from(m) << (e + shift as i64) as usize;
                    if v < 0.0 {
                        -mag
                    } else {
                        mag
                    }
                })
                .collect();
            (ints, shift)
        })
    }

    /// Undivided odd-order derivative with the minimal `(d, 2)` stencil.
    /// Beyond either end the samples continue along the line through the two
    /// outermost nodes, which is the constant extension whenever the contacts
    /// are flat.
    pub fn undivided_exact(&self, d: usize) -> Result<ExactDerivative> {
        if d % 2 == 0 {
            return Err(Error::InvalidOrder(format!("potential derivatives are odd-order, got {d}")));
        }
        let table = stencil::make_stencil(d, 2)?;
        let (nums, den) = table.integer_form();
        let (vals, shift) = self.fixed();
        let n = vals.len();
        if n < 2 {
            return Err(Error::InvalidGrid("potential needs at least two samples".into()));
        }
        let p = table.half_width() as isize;
        let left_step = &vals[1] - &vals[0];
        let right_step = &vals[n - 1] - &vals[n - 2];
        let ext = |idx: isize| -> IBig {
            if idx < 0 {
                &vals[0] + IBig::from(idx) * &left_step
            } else if idx as usize >= n {
                &vals[n - 1] + IBig::from(idx - (n as isize - 1)) * &right_step
            } else {
                vals[idx as usize].clone()
            }
        };
        let extended: Vec<IBig> = (-p..n as isize + p).map(ext).collect();
        let numerators = (0..n)
            .map(|i| {
                let mut acc = IBig::ZERO;
                for (s, c) in nums.iter().enumerate() {
                    if *c != IBig::ZERO {
                        acc += c * &extended[i + s];
                    }
                }
                acc
            })
            .collect();
        Ok(ExactDerivative {
            numerators,
            denominator: den,
            shift: *shift,
        })
    }

    /// Undivided derivative `dx^d U^(d)` in eV at every node (cached).
    pub fn undivided(&self, d: usize) -> Result<Arc<Vec<f64>>> {
        if let Some(v) = self.cache.read().unwrap().get(&d) {
            return Ok(v.clone());
        }
        let exact = self.undivided_exact(d)?;
        let v: Arc<Vec<f64>> = Arc::new((0..self.len()).map(|i| exact.to_f64(i)).collect());
        Ok(self.cache.write().unwrap().entry(d).or_insert(v).clone())
    }

    /// `U^(d)(x_i)` in eV/m^d.
    pub fn derivative(&self, d: usize, i: usize) -> Result<f64> {
        if i >= self.len() {
            return Err(Error::OutOfDomain(format!("x index {i} outside 0..{}", self.len())));
        }
        Ok(self.undivided(d)?[i] / self.dx.powi(d as i32))
    }
}

/// Free-function form of [`PotentialProfile::derivative`].
pub fn potential_derivative(profile: &PotentialProfile, d: usize, at: usize) -> Result<f64> {
    profile.derivative(d, at)
}

/// Double-barrier profile with a bias ramp across the barrier region.
/// The applied bias lowers the right contact by `bias` eV.
pub fn rtd_potential(grid: &PhaseGrid, geometry: &DeviceGeometry, bias: f64) -> Result<PotentialProfile> {
    let layout = geometry.layout(grid)?;
    let start = layout.left_barrier.start as f64 - 0.5;
    let end = layout.right_barrier.end as f64 - 0.5;
    let values = (0..grid.nx)
        .map(|i| {
            let barrier = layout.left_barrier.contains(&i) || layout.right_barrier.contains(&i);
            let u = if barrier { geometry.barrier_height } else { 0.0 };
            let t = ((i as f64 - start) / (end - start)).clamp(0.0, 1.0);
            u - bias * t
        })
        .collect();
    Ok(PotentialProfile::new(values, grid.dx))
}

/// Independent uniform samples in `[-amplitude, amplitude]`.
pub fn random_potential(seed: u64, amplitude: f64, grid: &PhaseGrid) -> Result<PotentialProfile> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::OutOfDomain(format!("amplitude must be nonnegative, got {amplitude}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..grid.nx)
        .map(|_| if amplitude == 0.0 { 0.0 } else { rng.gen_range(-amplitude..=amplitude) })
        .collect();
    Ok(PotentialProfile::new(values, grid.dx))
}

/// Zero background with a rectangular pulse of `width` cells centred at `center`.
pub fn pulse_potential(grid: &PhaseGrid, center: f64, width: usize, height: f64) -> Result<PotentialProfile> {
    if width == 0 {
        return Err(Error::OutOfDomain("pulse width must be at least one cell".into()));
    }
    let c = grid
        .x_index(center)
        .ok_or_else(|| Error::OutOfDomain(format!("pulse centre {:.3} nm outside the device", center * 1e9)))?;
    let first = c as isize - (width as isize - 1) / 2;
    let last = first + width as isize;
    if first < 0 || last as usize > grid.nx {
        return Err(Error::OutOfDomain(format!("pulse cells {first}..{last} leave the grid")));
    }
    let mut values = vec![0.0; grid.nx];
    for v in &mut values[first as usize..last as usize] {
        *v = height;
    }
    Ok(PotentialProfile::new(values, grid.dx))
}

pub fn flat_potential(grid: &PhaseGrid, level: f64) -> PotentialProfile {
    PotentialProfile::new(vec![level; grid.nx], grid.dx)
}

/// `U(x) = offset + slope * x` with `slope` in eV/m.
pub fn linear_potential(grid: &PhaseGrid, slope: f64, offset: f64) -> PotentialProfile {
    PotentialProfile::new((0..grid.nx).map(|i| offset + slope * grid.x(i)).collect(), grid.dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nx: usize) -> PhaseGrid {
        PhaseGrid::new(0.4e-9, 0.05e9, nx, 128, true).unwrap()
    }

    #[test]
    fn mesh_products() {
        assert!((grid(250).mesh_product() - 0.02).abs() < 1e-15);
        let g = PhaseGrid::new(0.4e-9, 0.07e9, 178, 128, true).unwrap();
        assert!((g.mesh_product() - 0.028).abs() < 1e-15);
        assert!(PhaseGrid::new(1.0, 1.0, 4, 4, true).is_ok());
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(PhaseGrid::new(0.0, 1.0, 4, 4, true).is_err());
        assert!(PhaseGrid::new(1.0, 1.0, 3, 4, true).is_err());
        assert!(PhaseGrid::new(1.0, 1.0, 4, 5, true).is_err());
    }

    #[test]
    fn offset_grid_avoids_zero() {
        let g = PhaseGrid::new(1.0, 1.0, 4, 8, true).unwrap();
        assert!(g.ks().iter().all(|k| *k != 0.0));
        assert_eq!(g.k(0), -3.5);
        assert_eq!(g.k(7), 3.5);
        assert_eq!(g.nearest_k_index(0.0), 4);
    }

    #[test]
    fn rtd_zero_bias_is_symmetric() {
        let g = grid(178);
        let u = rtd_potential(&g, &DeviceGeometry::default(), 0.0).unwrap();
        let v = u.values();
        for i in 0..v.len() {
            assert_eq!(v[i], v[v.len() - 1 - i]);
        }
        assert_eq!(u.max_abs(), 0.3);
    }

    #[test]
    fn rtd_bias_drop() {
        let g = grid(178);
        let u = rtd_potential(&g, &DeviceGeometry::default(), 0.16).unwrap();
        let v = u.values();
        assert!((v[v.len() - 1] - v[0] + 0.16).abs() < 1e-15);
    }

    #[test]
    fn rtd_rejects_fractional_widths() {
        let g = grid(178);
        let geo = DeviceGeometry {
            barrier_width: 3e-9,
            ..DeviceGeometry::default()
        };
        assert!(matches!(rtd_potential(&g, &geo, 0.0), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn random_is_bounded_and_deterministic() {
        let g = grid(200);
        let a = random_potential(7, 0.5, &g).unwrap();
        let b = random_potential(7, 0.5, &g).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(a.values().iter().all(|v| v.abs() <= 0.5));
        let z = random_potential(7, 0.0, &g).unwrap();
        assert!(z.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_cell_pulse() {
        let g = PhaseGrid::new(1e-9, 1e8, 64, 8, true).unwrap();
        let u = pulse_potential(&g, 5e-9, 1, 0.5).unwrap();
        for (i, v) in u.values().iter().enumerate() {
            assert_eq!(*v, if i == 5 { 0.5 } else { 0.0 });
        }
        assert_eq!(u.derivative(1, 40).unwrap(), 0.0);
        assert!(pulse_potential(&g, 80e-9, 1, 0.5).is_err());
    }

    #[test]
    fn polynomial_derivatives() {
        let g = PhaseGrid::new(0.5, 1.0, 16, 4, true).unwrap();
        let lin = linear_potential(&g, 0.25, 1.0);
        for i in 0..16 {
            assert_eq!(lin.derivative(1, i).unwrap(), 0.25);
            assert_eq!(lin.derivative(3, i).unwrap(), 0.0);
            assert_eq!(lin.derivative(5, i).unwrap(), 0.0);
        }
        let beta = 0.125;
        let quad = PotentialProfile::new((0..16).map(|i| beta * g.x(i) * g.x(i)).collect(), g.dx);
        for i in 3..13 {
            assert_eq!(quad.derivative(1, i).unwrap(), 2.0 * beta * g.x(i));
            assert_eq!(quad.derivative(3, i).unwrap(), 0.0);
        }
        let flat = flat_potential(&g, 0.3);
        for i in 0..16 {
            assert_eq!(flat.derivative(7, i).unwrap(), 0.0);
        }
    }

    #[test]
    fn set_values_clears_cache() {
        let g = PhaseGrid::new(1.0, 1.0, 8, 4, true).unwrap();
        let mut u = flat_potential(&g, 0.0);
        assert_eq!(u.derivative(1, 3).unwrap(), 0.0);
        u.set_values((0..8).map(|i| i as f64).collect());
        assert_eq!(u.derivative(1, 3).unwrap(), 1.0);
    }
}
