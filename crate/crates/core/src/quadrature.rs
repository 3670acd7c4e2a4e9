//! Quadrature kernels: adaptive Gauss–Kronrod, principal values by excision
//! and extrapolation, Genz–Malik cubature, retarded-time roots and log–log
//! slope fits.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::ops::{Add, Mul, Sub};

use nalgebra::{Vector2, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{Vec3, Worldline};

/// Tolerances and budgets shared by the integrators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Interval budget in 1D, region budget in d dimensions.
    pub max_subdivisions: usize,
    /// Excision half-widths for principal values, as fractions of the
    /// distance from the pole to the nearer end point.
    pub pv_excision_sequence: Vec<f64>,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            max_subdivisions: 2000,
            pv_excision_sequence: vec![0.1, 0.05, 0.025, 0.0125, 0.00625],
        }
    }
}

impl QuadratureSpec {
    pub fn new(abs_tol: f64, rel_tol: f64, max_subdivisions: usize) -> Result<Self> {
        let spec = Self {
            abs_tol,
            rel_tol,
            max_subdivisions,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_tolerances(&self, abs_tol: f64, rel_tol: f64) -> Self {
        Self {
            abs_tol,
            rel_tol,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return domain("quadrature tolerances must be > 0");
        }
        if self.max_subdivisions == 0 {
            return domain("max_subdivisions must be > 0");
        }
        let seq = &self.pv_excision_sequence;
        if seq.len() < 2 {
            return domain("excision sequence needs at least two entries");
        }
        if seq[0] <= 0.0 || seq[0] >= 1.0 || seq.windows(2).any(|w| !(w[1] < w[0] && w[1] > 0.0)) {
            return domain("excision sequence must decrease strictly inside (0, 1)");
        }
        Ok(())
    }

    pub(crate) fn target(&self, value: f64) -> f64 {
        self.abs_tol.max(self.rel_tol * value.abs())
    }
}

/// Value with an error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<T> {
    pub value: T,
    pub error: f64,
    pub evaluations: usize,
    pub converged: bool,
}

impl<T> Estimate<T> {
    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> Estimate<U> {
        Estimate {
            value: f(self.value),
            error: self.error,
            evaluations: self.evaluations,
            converged: self.converged,
        }
    }
}

/// Values an integrator can accumulate.
pub trait Quantity: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> {
    fn zero() -> Self;
    fn magnitude(&self) -> f64;
}

impl Quantity for f64 {
    fn zero() -> Self {
        0.0
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
}

impl Quantity for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

impl Quantity for Vector2<f64> {
    fn zero() -> Self {
        Vector2::zeros()
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

impl Quantity for Vector3<f64> {
    fn zero() -> Self {
        Vector3::zeros()
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

const XGK: [f64; 11] = [
    0.995657163025808080735527280689003,
    0.973906528517171720077964012084452,
    0.930157491355708226001207180059508,
    0.865063366688984510732096688423493,
    0.780817726586416897063717578345042,
    0.679409568299024406234327365114874,
    0.562757134668604683339000099272694,
    0.433395394129247190799265943165784,
    0.294392862701460198131126603103866,
    0.148874338981631210884826001129720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011694638867371874278064396062192,
    0.032558162307964727478818972459390,
    0.054755896574351996031381300244580,
    0.075039674810919952767043140916190,
    0.093125454583697605535065465083366,
    0.109387158802297641899210590325805,
    0.123491976262065851077208931994188,
    0.134709217311473325928054001771707,
    0.142775938577060080797094273138717,
    0.147739104901338491374841515972068,
    0.149445554002916905664936468389821,
];

// Gauss weights for the nodes XGK[1], XGK[3], .., XGK[9].
const WG: [f64; 5] = [
    0.066671344308688137593568809893332,
    0.149451349150580593145776339657697,
    0.219086362515982043995534934228163,
    0.269266719309996355091226921569469,
    0.295524224714752870173892994651338,
];

/// Abscissae of the 21-point Kronrod panel on `[a, b]`, centre first.
fn gk21_nodes(a: f64, b: f64) -> [f64; 21] {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut x = [c; 21];
    for j in 0..10 {
        x[1 + 2 * j] = c - h * XGK[j];
        x[2 + 2 * j] = c + h * XGK[j];
    }
    x
}

fn gk21_combine<T: Quantity>(fx: &[T; 21], a: f64, b: f64) -> (T, f64) {
    let h = 0.5 * (b - a);
    let fc = fx[0];
    let mut kron = fc * WGK[10];
    let mut gauss = T::zero();
    for j in 0..10 {
        let pair = fx[1 + 2 * j] + fx[2 + 2 * j];
        kron = kron + pair * WGK[j];
        if j % 2 == 1 {
            gauss = gauss + pair * WG[j / 2];
        }
    }
    let mean = kron * 0.5;
    let mut asc = WGK[10] * (fc - mean).magnitude();
    for j in 0..10 {
        asc += WGK[j] * ((fx[1 + 2 * j] - mean).magnitude() + (fx[2 + 2 * j] - mean).magnitude());
    }
    let asc = asc * h.abs();
    let mut err = ((kron - gauss) * h).magnitude();
    if asc > 0.0 && err > 0.0 {
        err = asc * (200.0 * err / asc).powf(1.5).min(1.0);
    }
    let value = kron * h;
    let floor = 50.0 * f64::EPSILON * value.magnitude();
    (value, err.max(floor))
}

/// One 21-point Kronrod panel: (value, error estimate).
pub fn gk21<T: Quantity, F: Fn(f64) -> T>(f: &F, a: f64, b: f64) -> (T, f64) {
    let x = gk21_nodes(a, b);
    let fx: [T; 21] = std::array::from_fn(|i| f(x[i]));
    gk21_combine(&fx, a, b)
}

fn gk21_par<T: Quantity + Send, F: Fn(f64) -> T + Sync>(f: &F, a: f64, b: f64) -> (T, f64) {
    let x = gk21_nodes(a, b);
    let v: Vec<T> = x.par_iter().map(|&xi| f(xi)).collect();
    let fx: [T; 21] = std::array::from_fn(|i| v[i]);
    gk21_combine(&fx, a, b)
}

struct Panel<T> {
    a: f64,
    b: f64,
    value: T,
    error: f64,
}

impl<T> PartialEq for Panel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T> Eq for Panel<T> {}
impl<T> PartialOrd for Panel<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Panel<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.a.total_cmp(&self.a))
    }
}

/// Global adaptive Gauss–Kronrod over the panels delimited by `points`
/// (sorted, at least two). Never evaluates `f` at any of the break points,
/// so integrable end-point singularities may sit there.
///
/// Returns the best estimate even when the budget runs out; `converged`
/// records whether the tolerance was met.
pub fn integrate_breaks<T: Quantity, F: Fn(f64) -> T>(f: F, points: &[f64], spec: &QuadratureSpec) -> Estimate<T> {
    adapt(|a, b| gk21(&f, a, b), points, spec)
}

/// As [`integrate_breaks`], evaluating the 21 nodes of each panel in
/// parallel. The result does not depend on the thread count.
pub fn integrate_breaks_par<T, F>(f: F, points: &[f64], spec: &QuadratureSpec) -> Estimate<T>
where
    T: Quantity + Send,
    F: Fn(f64) -> T + Sync,
{
    adapt(|a, b| gk21_par(&f, a, b), points, spec)
}

/// Maps each panel `[p_i, p_{i+1}]` onto `[i, i+1]` through the cubic
/// `p_i + (p_{i+1} - p_i)(3τ² - 2τ³)`. Inverse square-root singularities and
/// square-root kinks at the break points become smooth in `τ`.
pub fn smoothstep_panels<T: Quantity, F: Fn(f64) -> T>(f: F, points: &[f64]) -> (Vec<f64>, impl Fn(f64) -> T) {
    let pts = points.to_vec();
    let n = pts.len().saturating_sub(1);
    let taus: Vec<f64> = (0..=n).map(|i| i as f64).collect();
    let g = move |tau: f64| {
        let i = (tau.floor() as usize).min(n - 1);
        let s = tau - i as f64;
        let width = pts[i + 1] - pts[i];
        let x = pts[i] + width * s * s * (3.0 - 2.0 * s);
        let jac = width * 6.0 * s * (1.0 - s);
        if jac == 0.0 {
            T::zero()
        } else {
            f(x) * jac
        }
    };
    (taus, g)
}

fn adapt<T: Quantity, R: Fn(f64, f64) -> (T, f64)>(rule: R, points: &[f64], spec: &QuadratureSpec) -> Estimate<T> {
    let mut heap = BinaryHeap::new();
    let mut evaluations = 0;
    for w in points.windows(2) {
        if w[1] == w[0] {
            continue;
        }
        let (value, error) = rule( w[0], w[1]);
        evaluations += 21;
        heap.push(Panel {
            a: w[0],
            b: w[1],
            value,
            error,
        });
    }
    let budget = spec.max_subdivisions.max(heap.len());
    loop {
        let (total, err) = sum_panels(&heap);
        let target = spec.target(total.magnitude());
        if err <= target || heap.len() >= budget {
            return Estimate {
                value: total,
                error: err,
                evaluations,
                converged: err <= target,
            };
        }
        let worst = heap.pop().expect("nonempty heap");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // interval at machine resolution; keep it and give up refining
            heap.push(worst);
            let (total, err) = sum_panels(&heap);
            return Estimate {
                value: total,
                error: err,
                evaluations,
                converged: err <= spec.target(total.magnitude()),
            };
        }
        for (a, b) in [(worst.a, mid), (mid, worst.b)] {
            let (value, error) = rule( a, b);
            evaluations += 21;
            heap.push(Panel { a, b, value, error });
        }
    }
}

fn sum_panels<T: Quantity>(heap: &BinaryHeap<Panel<T>>) -> (T, f64) {
    let mut panels: Vec<&Panel<T>> = heap.iter().collect();
    panels.sort_by(|p, q| p.a.total_cmp(&q.a));
    let mut total = T::zero();
    let mut err = 0.0;
    for p in panels {
        total = total + p.value;
        err += p.error;
    }
    (total, err)
}

/// Adaptive integral of `f` over `[a, b]`, failing if the tolerance is not met.
pub fn integrate<T: Quantity, F: Fn(f64) -> T>(f: F, a: f64, b: f64, spec: &QuadratureSpec) -> Result<Estimate<T>> {
    checked(integrate_breaks(f, &[a, b], spec), "adaptive quadrature")
}

pub(crate) fn checked<T: Quantity>(est: Estimate<T>, what: &str) -> Result<Estimate<T>> {
    if est.converged {
        Ok(est)
    } else {
        Err(Error::NoConvergence {
            what: what.to_string(),
            estimate: est.value.magnitude(),
            error: est.error,
        })
    }
}

/// Principal value of `∫_a^b f` through a simple pole at `pole`.
///
/// The pole neighbourhood `[pole - h, pole + h]` (h the distance to the
/// nearer end) is folded onto `s ∈ [eps, h]`; the excised integrals `I(eps)`
/// for the scaled excision sequence are extrapolated to `eps = 0` with an
/// odd-power model `I(eps) = PV + c1 eps + c3 eps³ + …`, at the order whose
/// change from the previous one is smallest. Poles outside the
/// interval reduce to plain adaptive quadrature.
pub fn pv_integral_1d<F: Fn(f64) -> f64>(f: F, pole: f64, bounds: (f64, f64), spec: &QuadratureSpec) -> Result<Estimate<f64>> {
    spec.validate()?;
    let (a, b) = bounds;
    if !(a < b) {
        return domain(format!("empty interval [{a}, {b}]"));
    }
    if pole < a || pole > b {
        return integrate(f, a, b, spec);
    }
    let h = (pole - a).min(b - pole);
    if h <= 1e-14 * (b - a) {
        return domain(format!("pole {pole} on the end point of [{a}, {b}]"));
    }
    let inner = spec.with_tolerances(spec.abs_tol * 1e-2, spec.rel_tol * 1e-2);
    let mut evaluations = 0;
    let outer = {
        let mut total = 0.0;
        let mut err = 0.0;
        if pole - h > a {
            let e = integrate(&f, a, pole - h, &inner)?;
            total += e.value;
            err += e.error;
            evaluations += e.evaluations;
        }
        if pole + h < b {
            let e = integrate(&f, pole + h, b, &inner)?;
            total += e.value;
            err += e.error;
            evaluations += e.evaluations;
        }
        (total, err)
    };
    let folded = |s: f64| f(pole + s) + f(pole - s);
    let mut eps = Vec::new();
    let mut vals = Vec::new();
    let mut quad_err = outer.1;
    for &frac in &spec.pv_excision_sequence {
        let e = integrate(folded, frac * h, h, &inner)?;
        evaluations += e.evaluations;
        quad_err = quad_err.max(e.error);
        eps.push(frac * h);
        vals.push(e.value);
    }
    // successive orders; keep the one that changed least, as rounding
    // noise eventually dominates the higher orders
    let table: Vec<f64> = (1..=eps.len()).map(|m| odd_power_extrapolate(&eps[..m], &vals[..m])).collect();
    let (best, change) = table
        .windows(2)
        .map(|w| (w[1], (w[1] - w[0]).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((table[0], f64::INFINITY));
    let value = outer.0 + best;
    let error = change + quad_err;
    let est = Estimate {
        value,
        error,
        evaluations,
        converged: error <= spec.target(value),
    };
    if est.converged {
        Ok(est)
    } else {
        Err(Error::NoConvergence {
            what: "principal-value extrapolation".into(),
            estimate: value,
            error,
        })
    }
}

/// Value at `eps = 0` of the interpolant `c0 + c1 eps + c3 eps³ + …`
/// through the given samples.
fn odd_power_extrapolate(eps: &[f64], vals: &[f64]) -> f64 {
    let n = eps.len();
    let scale = eps[0];
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        if j == 0 {
            1.0
        } else {
            (eps[i] / scale).powi(2 * j as i32 - 1)
        }
    });
    let rhs = nalgebra::DVector::from_column_slice(vals);
    match m.lu().solve(&rhs) {
        Some(c) => c[0],
        None => vals[n - 1],
    }
}

/// Antiderivative-based value of `P ∫_0^1 dz / (z² - α²)`, valid on both
/// sides of `|α| = 1`: `(1/(2|α|)) ln|(1 - |α|)/(1 + |α|)|`.
pub fn pv_inverse_quadratic(alpha: f64) -> f64 {
    let a = alpha.abs();
    (((1.0 - a) / (1.0 + a)).abs()).ln() / (2.0 * a)
}

/// `P ∫_0^1 z dz / (z² - α²) = ½ ln|(1 - α²)/α²|`.
pub fn pv_linear_over_quadratic(alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    0.5 * ((1.0 - a2) / a2).abs().ln()
}

/// Worst deviation of the numeric principal value from the closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvOracleCheck {
    /// Poles inside the interval, both kernels.
    pub max_inside: f64,
    /// `|α| > 1`: no pole, plain quadrature against the same formulas.
    pub max_outside: f64,
    pub samples: usize,
}

/// Draws `n` values of α in `(0.05, 0.95)` and `n` in `(1.05, 5)` and
/// compares [`pv_integral_1d`] with [`pv_inverse_quadratic`] and
/// [`pv_linear_over_quadratic`].
pub fn pv_oracle_check(n: usize, seed: u64, spec: &QuadratureSpec) -> Result<PvOracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = |alpha: f64| -> Result<f64> {
        let a2 = alpha * alpha;
        let inv = pv_integral_1d(|z| 1.0 / (z * z - a2), alpha, (0.0, 1.0), spec)?.value;
        let lin = pv_integral_1d(|z| z / (z * z - a2), alpha, (0.0, 1.0), spec)?.value;
        Ok((inv - pv_inverse_quadratic(alpha)).abs().max((lin - pv_linear_over_quadratic(alpha)).abs()))
    };
    let (mut inside, mut outside) = (0.0f64, 0.0f64);
    for _ in 0..n {
        inside = inside.max(worst(rng.gen_range(0.05..0.95))?);
        outside = outside.max(worst(rng.gen_range(1.05..5.0))?);
    }
    Ok(PvOracleCheck {
        max_inside: inside,
        max_outside: outside,
        samples: n,
    })
}

// Genz–Malik degree-7 rule with embedded degree-5 rule.
const GM_L2: f64 = 0.358_568_582_800_318_1; // sqrt(9/70)
const GM_L4: f64 = 0.948_683_298_050_513_8; // sqrt(9/10)
const GM_L5: f64 = 0.688_247_201_611_685_3; // sqrt(9/19)

#[derive(Debug, Clone)]
struct Region {
    lo: Vec<f64>,
    hi: Vec<f64>,
    value: f64,
    error: f64,
    split_axis: usize,
}

impl PartialEq for Region {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Region {}
impl PartialOrd for Region {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Region {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error).then_with(|| {
            // deterministic tie break on the region corner
            for (a, b) in other.lo.iter().zip(&self.lo) {
                match a.total_cmp(b) {
                    Ordering::Equal => continue,
                    o => return o,
                }
            }
            Ordering::Equal
        })
    }
}

fn genz_malik<F: Fn(&[f64]) -> f64>(f: &F, lo: &[f64], hi: &[f64]) -> Region {
    let d = lo.len();
    let df = d as f64;
    let c: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let hw: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (h - l)).collect();
    let volume: f64 = hw.iter().map(|h| 2.0 * h).product();
    let mut x = c.clone();
    let f0 = f(&x);

    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let mut best_axis = 0;
    let mut best_diff = -1.0;
    for i in 0..d {
        let mut pair = |lam: f64| {
            x[i] = c[i] - lam * hw[i];
            let a = f(&x);
            x[i] = c[i] + lam * hw[i];
            let b = f(&x);
            x[i] = c[i];
            a + b
        };
        let p2 = pair(GM_L2);
        let p3 = pair(GM_L4);
        s2 += p2;
        s3 += p3;
        let diff = ((p2 - 2.0 * f0) - (p3 - 2.0 * f0) / 7.0).abs() * hw[i];
        if diff > best_diff * (1.0 + 1e-12) {
            best_diff = diff;
            best_axis = i;
        }
    }

    let mut s4 = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            for (si, sj) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                x[i] = c[i] + si * GM_L4 * hw[i];
                x[j] = c[j] + sj * GM_L4 * hw[j];
                s4 += f(&x);
            }
            x[i] = c[i];
            x[j] = c[j];
        }
    }

    let mut s5 = 0.0;
    for mask in 0..(1usize << d) {
        for i in 0..d {
            let s = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
            x[i] = c[i] + s * GM_L5 * hw[i];
        }
        s5 += f(&x);
    }

    let w1 = (12824.0 - 9120.0 * df + 400.0 * df * df) / 19683.0;
    let w2 = 980.0 / 6561.0;
    let w3 = (1820.0 - 400.0 * df) / 19683.0;
    let w4 = 200.0 / 19683.0;
    let w5 = 6859.0 / 19683.0 / (1u64 << d) as f64;
    let v1 = (729.0 - 950.0 * df + 50.0 * df * df) / 729.0;
    let v2 = 245.0 / 486.0;
    let v3 = (265.0 - 100.0 * df) / 1458.0;
    let v4 = 25.0 / 729.0;

    let r7 = volume * (w1 * f0 + w2 * s2 + w3 * s3 + w4 * s4 + w5 * s5);
    let r5 = volume * (v1 * f0 + v2 * s2 + v3 * s3 + v4 * s4);
    Region {
        lo: lo.to_vec(),
        hi: hi.to_vec(),
        value: r7,
        error: (r7 - r5).abs(),
        split_axis: best_axis,
    }
}

/// Number of regions refined per sweep. Fixed so results do not depend on
/// the thread count.
const ND_BATCH: usize = 16;

/// Adaptive Genz–Malik cubature over the box `[lo, hi]`, `2 <= d <= 6`.
///
/// Regions are refined in deterministic batches; children are evaluated in
/// parallel but combined in a fixed order.
pub fn adaptive_nd<F>(f: F, lo: &[f64], hi: &[f64], spec: &QuadratureSpec) -> Result<Estimate<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    checked(adaptive_nd_best(f, lo, hi, spec)?, "adaptive cubature")
}

/// As [`adaptive_nd`] but returns the best estimate when the budget runs out.
pub fn adaptive_nd_best<F>(f: F, lo: &[f64], hi: &[f64], spec: &QuadratureSpec) -> Result<Estimate<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = lo.len();
    if d < 2 || d > 6 || hi.len() != d {
        return domain(format!("adaptive_nd supports 2 to 6 dimensions, got {d}"));
    }
    if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
        return domain("degenerate integration box");
    }
    let per_region = 1 + 4 * d + 2 * d * (d - 1) + (1 << d);
    let mut heap = BinaryHeap::new();
    heap.push(genz_malik(&f, lo, hi));
    let mut evaluations = per_region;
    loop {
        let (value, error) = sum_regions(&heap);
        let target = spec.target(value);
        if error <= target || heap.len() >= spec.max_subdivisions {
            return Ok(Estimate {
                value,
                error,
                evaluations,
                converged: error <= target,
            });
        }
        let take = ND_BATCH.min(heap.len());
        let mut halves = Vec::with_capacity(2 * take);
        for _ in 0..take {
            let r = heap.pop().expect("nonempty heap");
            let ax = r.split_axis;
            let mid = 0.5 * (r.lo[ax] + r.hi[ax]);
            let mut hi1 = r.hi.clone();
            hi1[ax] = mid;
            let mut lo2 = r.lo.clone();
            lo2[ax] = mid;
            halves.push((r.lo.clone(), hi1));
            halves.push((lo2, r.hi));
        }
        let children: Vec<Region> = halves.par_iter().map(|(l, h)| genz_malik(&f, l, h)).collect();
        evaluations += children.len() * per_region;
        heap.extend(children);
    }
}

fn sum_regions(heap: &BinaryHeap<Region>) -> (f64, f64) {
    let mut regions: Vec<&Region> = heap.iter().collect();
    regions.sort_by(|p, q| {
        for (a, b) in p.lo.iter().zip(&q.lo) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    });
    let mut value = NeumaierSum::default();
    let mut error = NeumaierSum::default();
    for r in regions {
        value.add(r.value);
        error.add(r.error);
    }
    (value.total(), error.total())
}

/// Compensated (Kahan–Babuška–Neumaier) accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = NeumaierSum::default();
    for v in values {
        acc.add(v);
    }
    acc.total()
}

pub fn neumaier_sum_complex<I: IntoIterator<Item = Complex64>>(values: I) -> Complex64 {
    let mut re = NeumaierSum::default();
    let mut im = NeumaierSum::default();
    for v in values {
        re.add(v.re);
        im.add(v.im);
    }
    Complex64::new(re.total(), im.total())
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let (p, pm) = if n == 1 { (z, 1.0) } else { (p1, p0) };
            dp = nf * (z * p - pm) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            dp = 1.0;
        } else {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (z * p1 - p0) / (z * z - 1.0);
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Retarded time `t_r ∈ [0, t]` with `|x - X(t_r)| = t - t_r`, or `None`
/// when the signal emitted at `t = 0` has not yet reached `x`.
pub fn retarded_time_solve<W: Worldline + ?Sized>(w: &W, x: &Vec3, t: f64) -> Result<Option<f64>> {
    if !(t > 0.0) {
        return domain(format!("retarded time needs t > 0, got {t}"));
    }
    let g = |tr: f64| t - tr - (x - w.position(tr)).norm();
    let g0 = g(0.0);
    if g0 < 0.0 {
        return Ok(None);
    }
    let gt = g(t);
    if gt == 0.0 {
        return Ok(Some(t));
    }
    let (mut lo, mut hi) = (0.0, t);
    let (mut glo, mut ghi) = (g0, gt);
    if glo == 0.0 {
        return Ok(Some(0.0));
    }
    let tol = 1e-15 * t.max(1.0);
    let mut tr = lo - glo * (hi - lo) / (ghi - glo);
    for _ in 0..200 {
        if !(tr > lo && tr < hi) {
            tr = 0.5 * (lo + hi);
        }
        let k = w.kinematics(tr);
        let d = x - k.position;
        let r = d.norm();
        let gv = t - tr - r;
        if gv == 0.0 {
            return Ok(Some(tr));
        }
        if gv > 0.0 {
            lo = tr;
            glo = gv;
        } else {
            hi = tr;
            ghi = gv;
        }
        if hi - lo <= tol {
            break;
        }
        // Newton step: g' = -1 + n·v
        let dg = if r > 0.0 { -1.0 + d.dot(&k.velocity) / r } else { -1.0 };
        let next = tr - gv / dg;
        if gv.abs() < tol {
            return Ok(Some(tr));
        }
        tr = if next > lo && next < hi {
            next
        } else {
            lo - glo * (hi - lo) / (ghi - glo)
        };
    }
    Ok(Some(if glo.abs() < ghi.abs() { lo } else { hi }))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < 3 {
        return domain("loglog_slope needs at least 3 samples");
    }
    if samples.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return domain("loglog_slope needs positive samples");
    }
    let increasing = samples.windows(2).all(|w| w[1].0 > w[0].0);
    let decreasing = samples.windows(2).all(|w| w[1].0 < w[0].0);
    if !(increasing || decreasing) {
        return domain("loglog_slope needs strictly monotone abscissae");
    }
    let n = samples.len() as f64;
    let lx: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let ly: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}
