//! Central finite-difference stencils of arbitrary order.
//!
//! Coefficients are generated exactly. For the node set `-p..=p` the Lagrange
//! basis polynomial of node `l` is `P(t) / ((t - l) D_l)` with
//! `P(t) = prod (t - i)` and `D_l = P'(l)`, so the weight of node `l` for the
//! `d`-th derivative at zero is `d! [t^d] (P(t) / (t - l)) / D_l`. The quotient
//! coefficient comes from integer synthetic division, which keeps everything in
//! big integers until the final reduced fraction.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use dashu_base::{BitTest, Gcd};
use dashu_float::{round::mode::HalfEven, FBig};
use dashu_int::IBig;

use crate::error::{Error, Result};

/// Default ceiling on derivative order plus accuracy order.
pub const DEFAULT_MAX_COMBINED_ORDER: usize = 512;

/// Reduced fraction with a positive denominator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rational {
    pub numerator: IBig,
    pub denominator: IBig,
}

impl Rational {
    pub fn new(numerator: IBig, denominator: IBig) -> Self {
        assert!(denominator != IBig::ZERO, "zero denominator");
        let g = IBig::from(numerator.clone().gcd(denominator.clone()));
        let (mut n, mut d) = if g == IBig::ZERO || g == IBig::ONE {
            (numerator, denominator)
        } else {
            (numerator / &g, denominator / &g)
        };
        if d < IBig::ZERO {
            n = -n;
            d = -d;
        }
        if n == IBig::ZERO {
            d = IBig::ONE;
        }
        Rational {
            numerator: n,
            denominator: d,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.numerator == IBig::ZERO
    }

    /// Correctly rounded (to within one ulp) conversion.
    pub fn to_f64(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let n = FBig::<HalfEven, 2>::from(self.numerator.clone()).with_precision(96).value();
        let d = FBig::<HalfEven, 2>::from(self.denominator.clone()).with_precision(96).value();
        (n / d).to_f64().value()
    }

    /// `round(self * 2^shift)` as an integer, rounding half away from zero.
    pub fn to_fixed(&self, shift: usize) -> IBig {
        let scaled = self.numerator.clone() << shift;
        let twice = (scaled << 1) + if self.numerator >= IBig::ZERO {
            self.denominator.clone()
        } else {
            -self.denominator.clone()
        };
        twice / (self.denominator.clone() << 1)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denominator == IBig::ONE {
            write!(f, "{}", self.numerator)
        } else {
            write!(f, "{}/{}", self.numerator, self.denominator)
        }
    }
}

/// Half-width of the symmetric stencil for derivative `d` at accuracy `m`.
pub fn half_width(d: usize, m: usize) -> usize {
    (d + m - 1) / 2
}

/// Coefficients `a^l` for one (derivative, accuracy) pair.
#[derive(Debug)]
pub struct StencilTable {
    derivative_order: usize,
    accuracy_order: usize,
    half_width: usize,
    exact: Vec<Rational>,
    coefficients: Vec<f64>,
    weight_sum: f64,
    max_abs: f64,
}

impl StencilTable {
    fn from_exact(d: usize, m: usize, exact: Vec<Rational>) -> Self {
        let coefficients: Vec<f64> = exact.iter().map(Rational::to_f64).collect();
        let weight_sum = coefficients.iter().map(|c| c.abs()).sum();
        let max_abs = coefficients.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        StencilTable {
            derivative_order: d,
            accuracy_order: m,
            half_width: (exact.len() - 1) / 2,
            exact,
            coefficients,
            weight_sum,
            max_abs,
        }
    }

    pub fn derivative_order(&self) -> usize {
        self.derivative_order
    }

    pub fn accuracy_order(&self) -> usize {
        self.accuracy_order
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    /// Coefficients for offsets `-p..=p`, in order.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn exact(&self) -> &[Rational] {
        &self.exact
    }

    /// Coefficient at offset `l`, zero outside the stencil.
    pub fn coefficient(&self, l: isize) -> f64 {
        let p = self.half_width as isize;
        if l < -p || l > p {
            0.0
        } else {
            self.coefficients[(l + p) as usize]
        }
    }

    pub fn weight_sum(&self) -> f64 {
        self.weight_sum
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    /// `(offset, coefficient)` pairs.
    pub fn offsets(&self) -> impl Iterator<Item = (isize, f64)> + '_ {
        let p = self.half_width as isize;
        self.coefficients.iter().enumerate().map(move |(i, &c)| (i as isize - p, c))
    }

    /// Coefficients over a common denominator: `a^l = numerators[l] / denominator`.
    pub fn integer_form(&self) -> (Vec<IBig>, IBig) {
        let mut lcm = IBig::ONE;
        for r in &self.exact {
            let g = IBig::from(lcm.clone().gcd(r.denominator.clone()));
            lcm = lcm.clone() / g * &r.denominator;
        }
        let nums = self
            .exact
            .iter()
            .map(|r| r.numerator.clone() * (lcm.clone() / &r.denominator))
            .collect();
        (nums, lcm)
    }
}

/// Coefficients of `prod_{i=-p}^{p} (t - i)`, lowest degree first.
fn node_polynomial(p: usize) -> Vec<IBig> {
    let mut poly = vec![IBig::ZERO, IBig::ONE];
    for i in 1..=p {
        // multiply by (t^2 - i^2)
        let sq = IBig::from(i * i);
        let mut next = vec![IBig::ZERO; poly.len() + 2];
        for (k, c) in poly.iter().enumerate() {
            next[k + 2] += c;
            next[k] -= c * &sq;
        }
        poly = next;
    }
    poly
}

fn factorial(n: usize) -> IBig {
    (1..=n).fold(IBig::ONE, |acc, k| acc * IBig::from(k))
}

/// `P'(l) = (-1)^(p-l) (p+l)! (p-l)!`.
fn lagrange_denominator(p: usize, l: isize) -> IBig {
    let up = (p as isize + l) as usize;
    let down = (p as isize - l) as usize;
    let mag = factorial(up) * factorial(down);
    if down % 2 == 1 {
        -mag
    } else {
        mag
    }
}

/// `[t^d] P(t) / (t - l)` by whichever synthetic-division direction is shorter.
fn quotient_coefficient(poly: &[IBig], l: isize, d: usize) -> IBig {
    let n = poly.len() - 1;
    if l == 0 {
        return poly[d + 1].clone();
    }
    let li = IBig::from(l);
    if n - 1 - d <= d + 1 {
        let mut q = poly[n].clone();
        for k in (d + 1..n).rev() {
            q = &poly[k] + &li * q;
        }
        q
    } else {
        // P(0) = 0, so q_{-1} = 0 and q_k = (q_{k-1} - p_k) / l exactly.
        let mut q = IBig::ZERO;
        for c in poly.iter().take(d + 1) {
            q = (q - c) / &li;
        }
        q
    }
}

fn exact_coefficients(d: usize, p: usize) -> Vec<Rational> {
    let poly = node_polynomial(p);
    let dfact = factorial(d);
    (-(p as isize)..=p as isize)
        .map(|l| {
            let q = quotient_coefficient(&poly, l, d);
            Rational::new(q * &dfact, lagrange_denominator(p, l))
        })
        .collect()
}

/// All quotient polynomials on one node set in a single full pass each; used
/// when a whole family of derivatives shares the same half-width.
fn exact_family(p: usize, derivatives: &[usize]) -> Vec<Vec<Rational>> {
    let poly = node_polynomial(p);
    let n = poly.len() - 1;
    let mut out = vec![Vec::with_capacity(2 * p + 1); derivatives.len()];
    for l in -(p as isize)..=p as isize {
        let li = IBig::from(l);
        let mut q = vec![IBig::ZERO; n];
        q[n - 1] = poly[n].clone();
        for k in (1..n).rev() {
            q[k - 1] = &poly[k] + &li * &q[k];
        }
        let den = lagrange_denominator(p, l);
        for (slot, &d) in derivatives.iter().enumerate() {
            out[slot].push(Rational::new(q[d].clone() * factorial(d), den.clone()));
        }
    }
    out
}

fn validate(d: usize, m: usize, max: usize) -> Result<()> {
    if d < 1 {
        return Err(Error::InvalidOrder(format!("derivative order must be >= 1, got {d}")));
    }
    if m < 2 || m % 2 == 1 {
        return Err(Error::InvalidOrder(format!("accuracy order must be even and >= 2, got {m}")));
    }
    if d + m > max {
        return Err(Error::OrderOverflow {
            derivative: d,
            accuracy: m,
            max,
        });
    }
    Ok(())
}

/// First moment `q < d + m` at which `sum_l a^l l^q != q! [q == d]`, checked
/// exactly. Coefficients are indexed from offset `-p` for `p = (len - 1) / 2`.
pub fn moment_violation(d: usize, m: usize, coefficients: &[Rational]) -> Option<usize> {
    let p = (coefficients.len() as isize - 1) / 2;
    let mut lcm = IBig::ONE;
    for r in coefficients {
        let g = IBig::from(lcm.clone().gcd(r.denominator.clone()));
        lcm = lcm.clone() / g * &r.denominator;
    }
    let nums: Vec<IBig> = coefficients
        .iter()
        .map(|r| r.numerator.clone() * (lcm.clone() / &r.denominator))
        .collect();
    (0..d + m).find(|&q| {
        let sum: IBig = nums
            .iter()
            .enumerate()
            .map(|(i, a)| a * IBig::from(i as isize - p).pow(q))
            .sum();
        let want = if q == d { factorial(d) * &lcm } else { IBig::ZERO };
        sum != want
    })
}

/// Accuracy order that makes a derivative-`d` stencil span exactly `-p..=p`.
pub fn accuracy_for_half_width(d: usize, p: usize) -> Option<usize> {
    let m = if d % 2 == 1 { (2 * p + 1).checked_sub(d)? } else { (2 * p + 2).checked_sub(d)? };
    (m >= 2).then_some(m)
}

/// Memo of generated stencils, safe for concurrent readers.
#[derive(Debug)]
pub struct StencilCache {
    max_combined_order: usize,
    tables: RwLock<HashMap<(usize, usize), Arc<StencilTable>>>,
}

impl Default for StencilCache {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_COMBINED_ORDER)
    }
}

impl StencilCache {
    pub fn new(max_combined_order: usize) -> Self {
        StencilCache {
            max_combined_order,
            tables: RwLock::new(HashMap::new()),
        }
    }

    pub fn max_combined_order(&self) -> usize {
        self.max_combined_order
    }

    pub fn get(&self, d: usize, m: usize) -> Result<Arc<StencilTable>> {
        validate(d, m, self.max_combined_order)?;
        if let Some(t) = self.tables.read().unwrap().get(&(d, m)) {
            return Ok(t.clone());
        }
        let table = Arc::new(StencilTable::from_exact(d, m, exact_coefficients(d, half_width(d, m))));
        let mut w = self.tables.write().unwrap();
        Ok(w.entry((d, m)).or_insert(table).clone())
    }

    /// Every odd-derivative stencil of half-width `p` (orders 1, 3, .. up to
    /// `max_d`), generated together and cached.
    pub fn odd_family(&self, p: usize, max_d: usize) -> Result<Vec<Arc<StencilTable>>> {
        let ds: Vec<usize> = (1..=max_d.min(2 * p - 1)).step_by(2).collect();
        let keys: Vec<(usize, usize)> = ds
            .iter()
            .map(|&d| (d, accuracy_for_half_width(d, p).expect("odd d below 2p")))
            .collect();
        for &(d, m) in &keys {
            validate(d, m, self.max_combined_order)?;
        }
        let missing: Vec<usize> = {
            let r = self.tables.read().unwrap();
            keys.iter().filter(|k| !r.contains_key(k)).map(|k| k.0).collect()
        };
        if !missing.is_empty() {
            let family = exact_family(p, &missing);
            let mut w = self.tables.write().unwrap();
            for (d, exact) in missing.into_iter().zip(family) {
                let m = accuracy_for_half_width(d, p).unwrap();
                w.entry((d, m))
                    .or_insert_with(|| Arc::new(StencilTable::from_exact(d, m, exact)));
            }
        }
        let r = self.tables.read().unwrap();
        Ok(keys.iter().map(|k| r[k].clone()).collect())
    }
}

/// Process-wide cache with the default order ceiling.
pub fn global_cache() -> &'static StencilCache {
    static CACHE: OnceLock<StencilCache> = OnceLock::new();
    CACHE.get_or_init(StencilCache::default)
}

/// Stencil for the `d`-th derivative at accuracy order `m` (cached).
pub fn make_stencil(d: usize, m: usize) -> Result<Arc<StencilTable>> {
    global_cache().get(d, m)
}

/// `A = sum |a^l|` for the `(d, m)` stencil.
pub fn weight_sum(d: usize, m: usize) -> Result<f64> {
    Ok(make_stencil(d, m)?.weight_sum())
}

/// Floating-point weights by Fornberg's recursion, nodes visited centre-out.
/// Cheap and accurate to a few ulps at moderate orders; the exact tables are
/// authoritative.
pub fn fornberg_weights(d: usize, m: usize) -> Result<Vec<f64>> {
    validate(d, m, DEFAULT_MAX_COMBINED_ORDER)?;
    let p = half_width(d, m) as isize;
    let mut nodes = vec![0.0f64];
    for s in 1..=p {
        nodes.push(-(s as f64));
        nodes.push(s as f64);
    }
    let n = nodes.len();
    // c[j][k]: weight of node j for derivative k
    let mut c = vec![vec![0.0f64; d + 1]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = nodes[0];
    for i in 1..n {
        let mn = i.min(d);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i];
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    let mut out = vec![0.0; n];
    for (j, x) in nodes.iter().enumerate() {
        out[(*x as isize + p) as usize] = c[j][d];
    }
    Ok(out)
}

/// `ln C_j` with `C_j = 1 / (j! (2 dx dk)^(j-1))`.
pub fn ln_nonlocal_power(j: usize, mesh_product: f64) -> f64 {
    let lnfact: f64 = (2..=j).map(|k| (k as f64).ln()).sum();
    -lnfact - (j as f64 - 1.0) * (2.0 * mesh_product).ln()
}

/// Nonlocal power `C_j = 1 / (j! (2 dx dk)^(j-1))`.
pub fn nonlocal_power(j: usize, mesh_product: f64) -> f64 {
    if j <= 1 {
        // j = 0 gives 2 dx dk, j = 1 gives exactly 1
        return if j == 1 { 1.0 } else { 2.0 * mesh_product };
    }
    if j <= 170 {
        let base = 2.0 * mesh_product;
        let mut c = 1.0;
        for k in 1..=j {
            c /= k as f64;
            if k > 1 {
                c /= base;
            }
        }
        if c.is_finite() && c > 0.0 {
            return c;
        }
    }
    ln_nonlocal_power(j, mesh_product).exp()
}

/// Largest `C_j` over odd `j <= cap`, with its index.
pub fn max_nonlocal_power(mesh_product: f64, cap: usize) -> (usize, f64) {
    let mut best = (1, f64::NEG_INFINITY);
    for j in (1..=cap.max(1)).step_by(2) {
        let ln = ln_nonlocal_power(j, mesh_product);
        if ln > best.1 {
            best = (j, ln);
        }
    }
    (best.0, best.1.exp())
}

/// Exact `C_j * 2^shift`, rounded toward zero. `mesh_product` is taken at its
/// exact binary value.
pub fn nonlocal_power_fixed(j: usize, mesh_product: f64, shift: usize) -> IBig {
    assert!(mesh_product > 0.0 && mesh_product.is_finite());
    let (mant, exp) = decompose(2.0 * mesh_product);
    // (2 dx dk)^(j-1) = mant^(j-1) * 2^(exp (j-1))
    let e = j.saturating_sub(1);
    let den = factorial(j) * IBig::from(mant).pow(e);
    let pow2 = shift as i64 - exp * e as i64;
    if pow2 >= 0 {
        (IBig::ONE << pow2 as usize) / den
    } else {
        IBig::ZERO
    }
}

/// `x = mant * 2^exp` with an odd (or zero) integer mantissa.
pub(crate) fn decompose(x: f64) -> (u64, i64) {
    if x == 0.0 {
        return (0, 0);
    }
    let bits = x.abs().to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut mant, mut exp) = if raw_exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), raw_exp - 1075)
    };
    let tz = mant.trailing_zeros();
    mant >>= tz;
    exp += tz as i64;
    (mant, exp)
}

/// Bits needed to hold `|x|` (log2 magnitude of a big integer).
pub(crate) fn bit_length(x: &IBig) -> usize {
    x.bit_len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact_f64(d: usize, m: usize) -> Vec<f64> {
        make_stencil(d, m).unwrap().coefficients().to_vec()
    }

    #[test]
    fn first_derivative_second_order() {
        assert_eq!(exact_f64(1, 2), vec![-0.5, 0.0, 0.5]);
    }

    #[test]
    fn third_derivative_second_order() {
        assert_eq!(exact_f64(3, 2), vec![-0.5, 1.0, 0.0, -1.0, 0.5]);
    }

    #[test]
    fn first_derivative_fourth_order() {
        let t = make_stencil(1, 4).unwrap();
        let want = ["1/12", "-2/3", "0", "2/3", "-1/12"];
        let got: Vec<String> = t.exact().iter().map(|r| r.to_string()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn weight_sums() {
        assert_eq!(weight_sum(1, 2).unwrap(), 1.0);
        assert_eq!(weight_sum(3, 2).unwrap(), 3.0);
    }

    #[test]
    fn even_derivative_is_symmetric() {
        let t = make_stencil(2, 2).unwrap();
        assert_eq!(t.coefficients(), &[1.0, -2.0, 1.0]);
        let t = make_stencil(4, 4).unwrap();
        let c = t.coefficients();
        for l in 0..c.len() {
            assert_eq!(c[l], c[c.len() - 1 - l]);
        }
    }

    #[test]
    fn overflow_and_bad_orders() {
        assert!(matches!(make_stencil(1, 512), Err(Error::OrderOverflow { .. })));
        assert!(matches!(make_stencil(0, 2), Err(Error::InvalidOrder(_))));
        assert!(matches!(make_stencil(1, 3), Err(Error::InvalidOrder(_))));
        assert!(make_stencil(1, 510).is_ok());
    }

    #[test]
    fn both_division_directions_agree() {
        let poly = node_polynomial(6);
        for l in -6isize..=6 {
            for d in 0..13 {
                let n = poly.len() - 1;
                let li = IBig::from(l);
                let mut q = poly[n].clone();
                for k in (d + 1..n).rev() {
                    q = &poly[k] + &li * q;
                }
                assert_eq!(q, quotient_coefficient(&poly, l, d), "l={l} d={d}");
            }
        }
    }

    #[test]
    fn family_matches_individual() {
        let cache = StencilCache::default();
        let fam = cache.odd_family(7, 13).unwrap();
        for t in fam {
            let solo = exact_coefficients(t.derivative_order(), 7);
            assert_eq!(t.exact(), &solo[..]);
            assert_eq!(t.half_width(), 7);
        }
    }

    #[test]
    fn fornberg_matches_small_cases() {
        assert_eq!(fornberg_weights(1, 2).unwrap(), vec![-0.5, 0.0, 0.5]);
        let w = fornberg_weights(1, 4).unwrap();
        let want = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nonlocal_power_examples() {
        assert_eq!(nonlocal_power(1, 0.37), 1.0);
        assert!((nonlocal_power(3, 0.5) - 1.0 / 6.0).abs() < 1e-15);
        assert!((nonlocal_power(3, 0.02) - 1.0 / (6.0 * 0.04 * 0.04)).abs() < 1e-9);
    }

    #[test]
    fn max_nonlocal_power_location() {
        let (j, c) = max_nonlocal_power(0.02, 201);
        assert!((j as f64 - 25.0).abs() <= 2.0, "peak at {j}");
        assert!((c - nonlocal_power(j, 0.02)).abs() / c < 1e-9);
    }

    #[test]
    fn fixed_point_power() {
        let c = nonlocal_power_fixed(3, 0.5, 40);
        assert_eq!(c, IBig::from((1u64 << 40) / 6));
        assert_eq!(nonlocal_power_fixed(1, 0.02, 10), IBig::from(1024));
    }

    #[test]
    fn rational_fixed_rounding() {
        let r = Rational::new(IBig::from(-1), IBig::from(3));
        assert_eq!(r.to_fixed(2), IBig::from(-1));
        let r = Rational::new(IBig::from(1), IBig::from(2));
        assert_eq!(r.to_fixed(0), IBig::from(1));
    }
}
